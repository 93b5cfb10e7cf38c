"""Consistent-hash ring with weighted virtual nodes ("sticky routing").

Hash: keyed BLAKE2b with an 8-byte digest. The key is the 64-bit ring seed
in big-endian bytes and the digest is read as a big-endian unsigned integer.
Ring points hash the UTF-8 bytes of ``"<node_id>#<replica_index>"``; lookups
hash the UTF-8 bytes of the session id. Points sort by (hash, node_id), so a
hash collision is broken by the lexicographically smaller node id.
"""
import hashlib
import logging
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass

from app.errors import EmptyRingError, RingError

logger = logging.getLogger(__name__)

DEFAULT_VNODES_PER_WEIGHT = 128
MAX_SEED = 2 ** 64 - 1


def hash64(data, seed):
    """Seeded 64-bit hash of a string"""
    key = int(seed).to_bytes(8, 'big')
    return int.from_bytes(hashlib.blake2b(data.encode('utf-8'), digest_size=8, key=key).digest(), 'big')


@dataclass(frozen=True)
class RemapReport:
    """How many sampled sessions changed owner across a membership change"""
    sampled_sessions: int
    remapped: int

    @property
    def fraction(self):
        if self.sampled_sessions == 0:
            return 0.0
        return self.remapped / self.sampled_sessions

    def __repr__(self):
        return f'<RemapReport {self.remapped}/{self.sampled_sessions} ({self.fraction:.4f})>'


class HashRing:
    """
    Immutable ring value; membership changes return a new ring
    Safe to share read-only between concurrent handlers
    """

    def __init__(self, members, vnodes_per_weight, hash_seed, points):
        self._members = dict(members)
        self.vnodes_per_weight = vnodes_per_weight
        self.hash_seed = hash_seed
        self._points = points
        self._hashes = [h for h, _ in points]

    @classmethod
    def build(cls, members, vnodes_per_weight=DEFAULT_VNODES_PER_WEIGHT, hash_seed=0, allow_empty=False):
        """
        Build a ring from ``[(node_id, weight), ...]``
        Each member owns exactly weight * vnodes_per_weight points
        """
        members = list(members)
        if not members and not allow_empty:
            raise RingError('ring needs at least one member')
        if vnodes_per_weight < 1:
            raise RingError('vnodes_per_weight must be >= 1')
        if not 0 <= int(hash_seed) <= MAX_SEED:
            raise RingError('hash_seed must be an unsigned 64-bit integer')

        weights = {}
        for node_id, weight in members:
            if not node_id:
                raise RingError('node id must be non-empty')
            if node_id in weights:
                raise RingError(f'duplicate node id {node_id!r}')
            if int(weight) < 1:
                raise RingError(f'weight for {node_id!r} must be >= 1')
            weights[node_id] = int(weight)

        points = []
        for node_id, weight in weights.items():
            for replica in range(weight * vnodes_per_weight):
                points.append((hash64(f'{node_id}#{replica}', hash_seed), node_id))
        points.sort()
        return cls(weights, vnodes_per_weight, int(hash_seed), points)

    @property
    def members(self):
        """Sorted ``(node_id, weight)`` pairs"""
        return sorted(self._members.items())

    @property
    def node_ids(self):
        return sorted(self._members)

    @property
    def points(self):
        return list(self._points)

    def weight(self, node_id):
        return self._members[node_id]

    def __contains__(self, node_id):
        return node_id in self._members

    def __len__(self):
        return len(self._members)

    def is_empty(self):
        return not self._members

    def route(self, session_id):
        """Owner of the first ring point >= hash(session_id), wrapping past the maximum"""
        if not self._points:
            raise EmptyRingError()
        idx = bisect_left(self._hashes, hash64(session_id, self.hash_seed))
        if idx == len(self._points):
            idx = 0
        return self._points[idx][1]

    def with_members(self, members):
        """Ring over a different member set with the same seed and vnode count"""
        return HashRing.build(members, self.vnodes_per_weight, self.hash_seed, allow_empty=True)

    def remove_node(self, node_id, sample=()):
        """
        Drop a member; returns (new ring, RemapReport over ``sample``)
        Removing the last member is refused: the caller must decide what an empty cluster means
        """
        if node_id not in self._members:
            raise RingError(f'unknown node {node_id!r}')
        if len(self._members) == 1:
            raise RingError(f'refusing to remove {node_id!r}: it is the only member')
        ring = self.with_members((n, w) for n, w in self._members.items() if n != node_id)
        report = self.remap_report(ring, sample)
        logger.info(f'Removed {node_id} from ring: {report}')
        return ring, report

    def add_node(self, node_id, weight=1, sample=()):
        """Add a member; returns (new ring, RemapReport over ``sample``)"""
        if node_id in self._members:
            raise RingError(f'duplicate node id {node_id!r}')
        if int(weight) < 1:
            raise RingError(f'weight for {node_id!r} must be >= 1')
        ring = self.with_members(list(self._members.items()) + [(node_id, int(weight))])
        report = self.remap_report(ring, sample)
        logger.info(f'Added {node_id} (weight {weight}) to ring: {report}')
        return ring, report

    def remap_report(self, other, sample):
        sample = list(sample)
        remapped = sum(1 for s in sample if self.route(s) != other.route(s))
        return RemapReport(sampled_sessions=len(sample), remapped=remapped)

    def shares(self, sample):
        """Fraction of ``sample`` owned by each member"""
        sample = list(sample)
        counts = Counter(self.route(s) for s in sample)
        total = len(sample) or 1
        return {node_id: counts.get(node_id, 0) / total for node_id in self.node_ids}

    def point_counts(self):
        return dict(Counter(node_id for _, node_id in self._points))

    def __eq__(self, other):
        if not isinstance(other, HashRing):
            return NotImplemented
        return self._points == other._points and self._members == other._members

    def __hash__(self):
        return hash((tuple(self._points), self.hash_seed))

    def __repr__(self):
        return f'<HashRing {len(self._members)} members, {len(self._points)} points>'
