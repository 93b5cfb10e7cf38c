"""Latency and throughput model of an inference node and of the voice loop around it.

TTFA = endpointing/ASR + TTFT + TTS first audio + playout, and
TTFT = queue/first-token floor + prefill of the uncached tokens.
"""
import math
from dataclasses import dataclass, fields, replace
from statistics import NormalDist

from app.errors import CostModelError
from app.utils.distributions import Distribution

# 450 ms to prefill a 2,450-token cold context
DEFAULT_PREFILL_MS_PER_TOKEN = 0.1837
DEFAULT_TTFT_FLOOR_MS = 380.0
DEFAULT_TPOT_SIGMA = 0.4
Z_99 = NormalDist().inv_cdf(0.99)

STAGE_NAMES = ('endpoint_asr', 'ttft', 'tts', 'playout')


@dataclass(frozen=True)
class CostPreset:
    """Measured serving numbers of one model size"""
    name: str
    req_throughput: float
    in_tok_throughput: float
    out_tok_throughput: float
    tpot_p99_ms: float


PRESETS = {
    'student_300b': CostPreset('student_300b', 14.31, 2888.49, 3050.76, 117.69),
    'teacher_405b': CostPreset('teacher_405b', 10.96, 2211.29, 2335.36, 266.51),
}
DEFAULT_PRESET = 'student_300b'


def tpot_for_p99(p99_ms, sigma=DEFAULT_TPOT_SIGMA):
    """Lognormal TPOT whose 99th percentile is ``p99_ms``"""
    return Distribution.lognormal(p99_ms / math.exp(Z_99 * sigma), sigma)


@dataclass(frozen=True)
class CostModel:
    prefill_base_ms: float = 0.0
    prefill_ms_per_token: float = DEFAULT_PREFILL_MS_PER_TOKEN
    ttft_floor: Distribution = Distribution.constant(DEFAULT_TTFT_FLOOR_MS)
    tpot: Distribution = tpot_for_p99(PRESETS[DEFAULT_PRESET].tpot_p99_ms)
    endpoint_asr: Distribution = Distribution.uniform(150, 300)
    tts: Distribution = Distribution.uniform(100, 200)
    playout: Distribution = Distribution.constant(50)
    service_rate_reqs: float = PRESETS[DEFAULT_PRESET].req_throughput
    preset_name: str = DEFAULT_PRESET

    def __post_init__(self):
        if self.prefill_ms_per_token <= 0:
            raise CostModelError('prefill_ms_per_token must be > 0')
        if self.prefill_base_ms < 0:
            raise CostModelError('prefill_base_ms must be >= 0')
        if self.service_rate_reqs <= 0:
            raise CostModelError('service_rate_reqs must be > 0')
        for name in ('ttft_floor', 'tpot', 'endpoint_asr', 'tts', 'playout'):
            dist = getattr(self, name)
            if not isinstance(dist, Distribution):
                raise CostModelError(f'{name} must be a Distribution')
            if dist.kind not in ('constant', 'uniform', 'lognormal'):
                raise CostModelError(f'{name} must be constant, uniform or lognormal')

    @property
    def stages(self):
        return {'endpoint_asr': self.endpoint_asr, 'tts': self.tts, 'playout': self.playout}

    @property
    def admission_interval_ms(self):
        """Spacing between request admissions on one node"""
        return 1000.0 / self.service_rate_reqs

    def prefill_latency(self, uncached_tokens):
        if uncached_tokens < 0:
            raise CostModelError('uncached_tokens must be >= 0')
        return self.prefill_base_ms + self.prefill_ms_per_token * uncached_tokens

    def decode_samples(self, output_tokens, rng):
        """Per-token decode latencies"""
        if output_tokens < 0:
            raise CostModelError('output_tokens must be >= 0')
        return self.tpot.sample_many(rng, int(output_tokens))

    def decode_latency(self, output_tokens, rng):
        if output_tokens == 0:
            return 0.0
        return float(self.decode_samples(output_tokens, rng).sum())

    def ttft(self, prefill_ms, rng):
        if prefill_ms < 0:
            raise CostModelError('prefill_ms must be >= 0')
        return self.ttft_floor.sample(rng) + prefill_ms

    def ttfa(self, ttft_ms, rng):
        """Returns (total, breakdown); the breakdown sums to the total"""
        if ttft_ms < 0:
            raise CostModelError('ttft_ms must be >= 0')
        breakdown = {
            'endpoint_asr': self.endpoint_asr.sample(rng),
            'ttft': float(ttft_ms),
            'tts': self.tts.sample(rng),
            'playout': self.playout.sample(rng),
        }
        total = 0.0
        for name in STAGE_NAMES:
            total += breakdown[name]
        return total, breakdown

    @classmethod
    def preset(cls, name, tpot_sigma=DEFAULT_TPOT_SIGMA):
        """(CostModel, CostPreset) calibrated to a named model size"""
        if name not in PRESETS:
            raise CostModelError(f'unknown cost preset {name!r}; expected one of {", ".join(sorted(PRESETS))}')
        p = PRESETS[name]
        model = cls(tpot=tpot_for_p99(p.tpot_p99_ms, tpot_sigma),
                    service_rate_reqs=p.req_throughput, preset_name=name)
        return model, p

    @classmethod
    def from_config(cls, data, base=None):
        """
        Build from a scenario ``cost`` block: an optional ``preset`` plus field overrides
        Distribution fields take distribution blocks; ``tpot_sigma`` refits the preset TPOT
        """
        data = dict(data or {})
        if 'preset' in data:
            model, _ = cls.preset(data.pop('preset'), data.pop('tpot_sigma', DEFAULT_TPOT_SIGMA))
        elif base is not None:
            model = base
            data.pop('tpot_sigma', None)
        else:
            model = cls()
            if 'tpot_sigma' in data:
                model = replace(model, tpot=tpot_for_p99(PRESETS[DEFAULT_PRESET].tpot_p99_ms,
                                                         data.pop('tpot_sigma')))

        known = {f.name: f for f in fields(cls)}
        overrides = {}
        for key, value in data.items():
            if key not in known or key == 'preset_name':
                raise CostModelError(f'unknown cost key {key!r}')
            if known[key].type is Distribution or known[key].type == 'Distribution':
                overrides[key] = Distribution.from_config(value)
            else:
                overrides[key] = float(value)
        return replace(model, **overrides)

    def to_config(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = value.to_config() if isinstance(value, Distribution) else value
        return out

    def __repr__(self):
        return (f'<CostModel {self.preset_name} {self.prefill_ms_per_token} ms/tok '
                f'{self.service_rate_reqs} req/s>')
