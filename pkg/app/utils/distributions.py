"""Parametric distributions and seeded random streams.

Every sample in the project comes from a numpy ``Generator`` obtained through
:func:`stream`, so adding a new consumer never perturbs existing ones.
"""
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from app.errors import CostModelError

KINDS = ('constant', 'uniform', 'lognormal', 'geometric', 'exponential')

# Fields a distribution block may carry, per kind
_FIELDS = {
    'constant': ('value',),
    'uniform': ('lo', 'hi'),
    'lognormal': ('median', 'sigma'),
    'geometric': ('median', 'shift'),
    'exponential': ('mean',),
}


def stream_key(purpose, entity=''):
    """Stable 63-bit key for a (purpose, entity) pair"""
    digest = hashlib.blake2b(f'{purpose}:{entity}'.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'big') >> 1


def stream(seed, purpose, entity=''):
    """Independent generator derived from the run seed and a stream identity"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_key(purpose, entity)]))


@dataclass(frozen=True)
class Distribution:
    """
    One-dimensional distribution in the unit of its consumer (ms or tokens)
    lognormal is parametrized by its median so configs match reported medians;
    geometric is shifted so its median lands on ``median`` and its minimum on ``shift + 1``
    """
    kind: str = 'constant'
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    median: float = 0.0
    sigma: float = 0.0
    shift: int = 0
    mean: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CostModelError(f'unknown distribution kind {self.kind!r}; expected one of {", ".join(KINDS)}')
        if self.kind == 'constant' and self.value < 0:
            raise CostModelError('constant distribution must be >= 0')
        if self.kind == 'uniform' and not (0 < self.lo <= self.hi):
            raise CostModelError('uniform distribution needs 0 < lo <= hi')
        if self.kind == 'lognormal' and (self.median <= 0 or self.sigma < 0):
            raise CostModelError('lognormal distribution needs median > 0 and sigma >= 0')
        if self.kind == 'geometric' and (self.shift < 0 or self.median <= self.shift):
            raise CostModelError('geometric distribution needs 0 <= shift < median')
        if self.kind == 'exponential' and self.mean <= 0:
            raise CostModelError('exponential distribution needs mean > 0')

    @classmethod
    def constant(cls, value):
        return cls(kind='constant', value=float(value))

    @classmethod
    def uniform(cls, lo, hi):
        return cls(kind='uniform', lo=float(lo), hi=float(hi))

    @classmethod
    def lognormal(cls, median, sigma):
        return cls(kind='lognormal', median=float(median), sigma=float(sigma))

    @classmethod
    def geometric(cls, median, shift=0):
        return cls(kind='geometric', median=float(median), shift=int(shift))

    @classmethod
    def from_config(cls, data):
        """Build from a scenario block such as ``{kind: lognormal, median: 128, sigma: 0.1}``"""
        if isinstance(data, (int, float)) and not isinstance(data, bool):
            return cls.constant(data)
        if not isinstance(data, dict) or 'kind' not in data:
            raise CostModelError('distribution must be a number or a mapping with a "kind" key')
        kind = data['kind']
        allowed = _FIELDS.get(kind)
        if allowed is None:
            raise CostModelError(f'unknown distribution kind {kind!r}')
        unknown = set(data) - set(allowed) - {'kind'}
        if unknown:
            raise CostModelError(f'unknown key(s) for {kind} distribution: {", ".join(sorted(unknown))}')
        missing = [f for f in allowed if f not in data and not (kind == 'geometric' and f == 'shift')]
        if missing:
            raise CostModelError(f'{kind} distribution missing {", ".join(missing)}')
        return cls(kind=kind, **{k: data[k] for k in allowed if k in data})

    def to_config(self):
        return {'kind': self.kind, **{f: getattr(self, f) for f in _FIELDS[self.kind]}}

    def sample_many(self, rng, n):
        """Vector of ``n`` samples"""
        if self.kind == 'constant':
            return np.full(n, self.value, dtype=float)
        if self.kind == 'uniform':
            return rng.uniform(self.lo, self.hi, size=n)
        if self.kind == 'lognormal':
            return rng.lognormal(mean=math.log(self.median), sigma=self.sigma, size=n)
        if self.kind == 'exponential':
            return rng.exponential(self.mean, size=n)
        # P(G > k) = (1-p)^k, so p = 1 - 2^(-1/m) puts the median of G at m
        p = 1.0 - 0.5 ** (1.0 / (self.median - self.shift))
        return (self.shift + rng.geometric(p, size=n)).astype(float)

    def sample(self, rng):
        return float(self.sample_many(rng, 1)[0])

    def sample_count(self, rng, minimum=0):
        """Integer sample for token or turn counts"""
        return max(minimum, int(round(self.sample(rng))))

    @property
    def typical(self):
        """Median-like central value, used for documentation and sizing"""
        if self.kind == 'constant':
            return self.value
        if self.kind == 'uniform':
            return (self.lo + self.hi) / 2.0
        if self.kind == 'exponential':
            return self.mean * math.log(2)
        return self.median
