from flask import current_app, jsonify, request

from app.admin import admin_bp

DEFAULT_SHARE_SAMPLE = 10000
MAX_SHARE_SAMPLE = 100000


def _gateway():
    return current_app.extensions.get('cacheroute.gateway')


@admin_bp.before_request
def require_gateway():
    if _gateway() is None:
        return jsonify({'error': 'no gateway is running'}), 503


@admin_bp.route('/snapshot')
def snapshot():
    """Ring members with health states, per-node cache metrics, latency since start"""
    return jsonify(_gateway().snapshot_threadsafe())


@admin_bp.route('/ring')
def ring():
    """Effective ring members, virtual point counts and sampled key shares"""
    try:
        sample = int(request.args.get('sample', DEFAULT_SHARE_SAMPLE))
    except ValueError:
        return jsonify({'error': 'sample must be an integer'}), 400
    if not 1 <= sample <= MAX_SHARE_SAMPLE:
        return jsonify({'error': f'sample must be between 1 and {MAX_SHARE_SAMPLE}'}), 400

    gateway = _gateway()
    current = gateway.monitor.ring
    sessions = [f'session-{i}' for i in range(sample)]
    return jsonify({
        'members': current.node_ids,
        'configured': gateway.monitor.full_ring.node_ids,
        'points': current.point_counts(),
        'shares': current.shares(sessions) if not current.is_empty() else {},
        'sample': sample,
    })


@admin_bp.route('/health')
def health():
    gateway = _gateway()
    return jsonify({
        'enabled': gateway.monitor.cfg.enabled,
        'nodes': gateway.monitor.snapshot(),
        'transitions': [
            {'node': t.node, 'from': t.from_state, 'to': t.to_state, 'at_ms': t.at_ms}
            for t in gateway.monitor.transitions
        ],
    })
