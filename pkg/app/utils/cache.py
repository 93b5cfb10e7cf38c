"""Per-node prefix (KV) cache model accounted in context tokens.

Eviction is strict LRU by last lookup or commit. One context token is one
capacity unit; ``bytes_per_token`` only scales the reported footprint.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass

from app.errors import CacheError

logger = logging.getLogger(__name__)


@dataclass
class CacheEntry:
    session: str
    cached_prefix_tokens: int
    last_access: int

    @property
    def resident_cost_tokens(self):
        return self.cached_prefix_tokens

    def __repr__(self):
        return f'<CacheEntry {self.session} {self.cached_prefix_tokens} tok>'


@dataclass(frozen=True)
class CacheOutcome:
    hit_tokens: int
    miss_tokens: int
    cold_start: bool

    @property
    def required_tokens(self):
        return self.hit_tokens + self.miss_tokens


@dataclass
class CacheCounters:
    lookups: int = 0
    hits_tokens: int = 0
    miss_tokens: int = 0
    cold_lookups: int = 0
    cold_miss_tokens: int = 0
    evicted_entries: int = 0
    evicted_tokens: int = 0
    committed_tokens: int = 0

    def merge(self, other):
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self


@dataclass(frozen=True)
class CacheMetrics:
    """Token-level cache efficiency: CHR = hits / (hits + misses)"""
    lookups: int
    hit_tokens: int
    miss_tokens: int
    chr: float
    reuse_factor: float = None  # None when there were no misses ("all-hit")
    avg_recomputed_cold: float = None
    avg_recomputed_steady: float = None
    eviction_rate: float = 0.0

    @property
    def all_hit(self):
        return self.reuse_factor is None

    @classmethod
    def from_counters(cls, c):
        if c.lookups == 0:
            raise CacheError('no lookups recorded')
        required = c.hits_tokens + c.miss_tokens
        steady_lookups = c.lookups - c.cold_lookups
        return cls(
            lookups=c.lookups,
            hit_tokens=c.hits_tokens,
            miss_tokens=c.miss_tokens,
            chr=c.hits_tokens / required if required else 0.0,
            reuse_factor=c.hits_tokens / c.miss_tokens if c.miss_tokens else None,
            avg_recomputed_cold=c.cold_miss_tokens / c.cold_lookups if c.cold_lookups else None,
            avg_recomputed_steady=((c.miss_tokens - c.cold_miss_tokens) / steady_lookups
                                   if steady_lookups else None),
            eviction_rate=c.evicted_tokens / c.committed_tokens if c.committed_tokens else 0.0,
        )

    @classmethod
    def aggregate(cls, caches):
        total = CacheCounters()
        for cache in caches:
            total.merge(cache.counters)
        return cls.from_counters(total)


class NodeCache:
    """Prefix cache of one inference node; confined to that node's handler"""

    def __init__(self, capacity_tokens, bytes_per_token=1):
        if capacity_tokens < 1:
            raise CacheError('capacity_tokens must be >= 1')
        self.capacity_tokens = int(capacity_tokens)
        self.bytes_per_token = bytes_per_token
        self.entries = OrderedDict()
        self.counters = CacheCounters()
        self._resident = 0
        self._clock = 0
        self.last_evictions = []

    def _tick(self, now):
        self._clock += 1
        return self._clock if now is None else now

    @property
    def resident_tokens(self):
        return self._resident

    @property
    def resident_bytes(self):
        return self._resident * self.bytes_per_token

    def cached_prefix(self, session):
        entry = self.entries.get(session)
        return entry.cached_prefix_tokens if entry else 0

    def lookup(self, session, required_context_tokens, now=None):
        """Split a turn's required context into cached hits and tokens to prefill"""
        if required_context_tokens < 0:
            raise CacheError('required_context_tokens must be >= 0')
        entry = self.entries.get(session)
        cached = entry.cached_prefix_tokens if entry else 0
        hit = min(cached, required_context_tokens)
        miss = required_context_tokens - hit
        cold = hit == 0 and required_context_tokens > 0

        if entry is not None:
            entry.last_access = self._tick(now)
            self.entries.move_to_end(session)

        c = self.counters
        c.lookups += 1
        c.hits_tokens += hit
        c.miss_tokens += miss
        if cold:
            c.cold_lookups += 1
            c.cold_miss_tokens += miss
        return CacheOutcome(hit_tokens=hit, miss_tokens=miss, cold_start=cold)

    def commit(self, session, new_total_context_tokens, now=None):
        """
        Persist a session's prefix after a turn; returns the evicted session ids
        Other sessions are evicted oldest-first until the new entry fits;
        ``last_evictions`` keeps the (session, tokens) pairs of the latest commit
        """
        self.last_evictions = []
        entry = self.entries.get(session)
        current = entry.cached_prefix_tokens if entry else 0
        if new_total_context_tokens < current:
            raise CacheError(f'history of {session} shrank from {current} to {new_total_context_tokens}')
        if new_total_context_tokens > self.capacity_tokens:
            # the committing session loses its stale prefix
            if entry is not None:
                self._drop(session)
                self.last_evictions = [(session, current)]
            raise CacheError(f'entry exceeds capacity ({new_total_context_tokens} > {self.capacity_tokens})')

        evicted = []
        need = self._resident - current + new_total_context_tokens
        for victim in list(self.entries):
            if need <= self.capacity_tokens:
                break
            if victim == session:
                continue
            tokens = self._drop(victim)
            need -= tokens
            evicted.append((victim, tokens))

        access = self._tick(now)
        if entry is None:
            self.entries[session] = CacheEntry(session, new_total_context_tokens, access)
        else:
            entry.cached_prefix_tokens = new_total_context_tokens
            entry.last_access = access
            self.entries.move_to_end(session)
        self._resident += new_total_context_tokens - current
        self.counters.committed_tokens += new_total_context_tokens - current

        self.last_evictions = evicted
        if evicted:
            logger.debug(f'Evicted {len(evicted)} entries to fit {session}')
        return [victim for victim, _ in evicted]

    def _drop(self, session):
        tokens = self.entries.pop(session).cached_prefix_tokens
        self._resident -= tokens
        self.counters.evicted_entries += 1
        self.counters.evicted_tokens += tokens
        return tokens

    def reset(self):
        """Drop every entry, as after a process crash"""
        for session, entry in self.entries.items():
            self.counters.evicted_entries += 1
            self.counters.evicted_tokens += entry.cached_prefix_tokens
        self.entries.clear()
        self._resident = 0

    def metrics(self):
        return CacheMetrics.from_counters(self.counters)

    def __repr__(self):
        return f'<NodeCache {self._resident}/{self.capacity_tokens} tok, {len(self.entries)} entries>'
