"""Live-mode process orchestration: nodes, gateway and the admin HTTP server."""
import asyncio
import logging
import signal
import threading

from werkzeug.serving import make_server

from app.errors import PortInUseError
from app.gateway.gateway import Gateway
from app.gateway.node import InferenceNode
from app.utils.network import NetworkManager

logger = logging.getLogger(__name__)

ROLES = ('node', 'gateway', 'cluster')


class AdminServer:
    """The Flask admin app served from a daemon thread"""

    def __init__(self, app, host, port):
        self._server = make_server(host, port, app, threaded=True)
        self.host = host
        self.port = self._server.server_port
        self._thread = threading.Thread(target=self._server.serve_forever, name='admin-http', daemon=True)

    def start(self):
        self._thread.start()
        logger.info(f'Admin endpoints on http://{NetworkManager.format_address(self.host, self.port)}/admin')

    def stop(self):
        self._server.shutdown()
        self._thread.join(timeout=5.0)


def _check_free(host, port):
    if not NetworkManager.is_port_free(host, port):
        raise PortInUseError(host, port)


class LiveCluster:
    """
    Starts the processes a role needs inside one event loop
    ``node`` runs the scenario's nodes, ``gateway`` the gateway against already
    running nodes, ``cluster`` both
    """

    def __init__(self, scenario, cfg, role='cluster', node_ids=None, admin=True):
        if role not in ROLES:
            raise ValueError(f'role must be one of {", ".join(ROLES)}')
        self.scenario = scenario
        self.cfg = cfg
        self.role = role
        self.node_ids = list(node_ids or scenario.node_ids)
        self.admin = admin
        self.nodes = {}
        self.gateway = None
        self.admin_server = None
        self.addresses = {}
        self._stop = None

    def node_addresses(self):
        return {node.id: NetworkManager.node_address(node, i, self.cfg)
                for i, node in enumerate(self.scenario.nodes)}

    def gateway_address(self):
        if self.scenario.gateway.address:
            return NetworkManager.parse_address(self.scenario.gateway.address)
        return self.cfg.HOST, self.cfg.GATEWAY_PORT

    def admin_address(self):
        if self.scenario.gateway.admin_address:
            return NetworkManager.parse_address(self.scenario.gateway.admin_address)
        return self.cfg.HOST, self.cfg.ADMIN_PORT

    def check_ports(self):
        """Fail before binding anything when a configured port is taken"""
        wanted = []
        if self.role in ('node', 'cluster'):
            planned = self.node_addresses()
            wanted.extend(planned[n] for n in self.node_ids)
        if self.role in ('gateway', 'cluster'):
            wanted.append(self.gateway_address())
            if self.admin:
                wanted.append(self.admin_address())
        for host, port in wanted:
            _check_free(host, port)

    async def start(self):
        self.check_ports()
        self.addresses = self.node_addresses()
        if self.role in ('node', 'cluster'):
            for node_id in self.node_ids:
                node = InferenceNode(self.scenario.node(node_id), self.scenario.seed, self.cfg.MAX_FRAME_BYTES)
                host, port = self.addresses[node_id]
                self.addresses[node_id] = (host, await node.start(host, port))
                self.nodes[node_id] = node

        if self.role in ('gateway', 'cluster'):
            self.gateway = Gateway(self.scenario, self.addresses, self.cfg.MAX_FRAME_BYTES)
            await self.gateway.start(*self.gateway_address())
            if self.admin:
                from app import create_app
                app = create_app(self.cfg, gateway=self.gateway)
                host, port = self.admin_address()
                try:
                    self.admin_server = AdminServer(app, host, port)
                except OSError:
                    raise PortInUseError(host, port)
                self.admin_server.start()
        return self

    async def stop(self):
        grace = self.cfg.SHUTDOWN_GRACE_S
        if self.admin_server is not None:
            self.admin_server.stop()
            self.admin_server = None
        if self.gateway is not None:
            await self.gateway.stop(grace)
        for node in self.nodes.values():
            await node.stop(grace)

    async def kill_node(self, node_id):
        """Hard-stop one node, dropping its connections (failure drills)"""
        node = self.nodes.pop(node_id)
        await node.stop(grace_s=0.0)
        logger.warning(f'Node {node_id} killed')

    async def serve_forever(self):
        """Run until SIGINT or SIGTERM, then drain and stop"""
        loop = asyncio.get_running_loop()
        self._stop = asyncio.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            try:
                loop.add_signal_handler(sig, self._stop.set)
            except (NotImplementedError, RuntimeError):
                pass
        await self.start()
        try:
            await self._stop.wait()
            logger.info('Shutdown requested, draining in-flight turns')
        finally:
            await self.stop()

    def request_stop(self):
        if self._stop is not None:
            self._stop.set()

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.stop()
