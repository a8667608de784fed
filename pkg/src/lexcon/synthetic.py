"""Seeded statistical stand-in for an LLM under keyword constraints.

Each keyword is included independently with a probability that depends on its
prompt position, the keyword count and the configured bias. Random draws come
from a counter-based stream keyed by ``(seed, call_index, position, lane)``,
so results do not depend on call order or thread scheduling.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Mapping, Optional

from .backend import GenerationRequest, GenerationResult
from .constraints import Keyword, KeywordSet, MatchPolicy

_MASK = (1 << 64) - 1
_LANE_INCLUDE = 0
_LANE_SPLIT = 1
DECAY_ONSET = 5
BIAS_MODES = ("none", "primacy", "recency")
STRATEGIES = ("vanilla", "rj", "dnc")


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix(*key: int) -> int:
    h = 0
    for k in key:
        h = _splitmix64(h ^ (k & _MASK))
    return h


def uniform(*key: int) -> float:
    """Uniform draw in [0, 1) determined entirely by ``key``."""
    return (mix(*key) >> 11) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class SyntheticModelConfig:
    base_coverage: float = 0.8
    bias_mode: str = "none"
    bias_strength: float = 0.0
    count_decay: float = 1.0
    compound_split_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.base_coverage <= 1:
            raise ValueError("base_coverage must be in [0, 1]")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be >= 0")
        if not 0 <= self.count_decay <= 1:
            raise ValueError("count_decay must be in [0, 1]")
        if not 0 <= self.compound_split_prob <= 1:
            raise ValueError("compound_split_prob must be in [0, 1]")

    @property
    def independent(self) -> bool:
        return (
            (self.bias_mode == "none" or self.bias_strength == 0)
            and self.count_decay == 1
            and self.compound_split_prob == 0
        )

    def position_weight(self, i: int, m: int) -> float:
        if m == 1 or self.bias_mode == "none":
            return 1.0
        if self.bias_mode == "primacy":
            return 1 + self.bias_strength * (m - 1 - i) / (m - 1)
        return 1 + self.bias_strength * i / (m - 1)

    def inclusion_probabilities(self, m: int) -> list[float]:
        scale = self.base_coverage * self.count_decay ** max(0, m - DECAY_ONSET)
        return [min(1.0, max(0.0, scale * self.position_weight(i, m))) for i in range(m)]


def synth_text(X: KeywordSet, cfg: SyntheticModelConfig, call_index: int,
               compounds: Mapping[str, tuple[str, str]] = {}) -> str:
    probs = cfg.inclusion_probabilities(len(X))
    emitted = []
    for i, (kw, p) in enumerate(zip(X, probs)):
        if uniform(cfg.seed, call_index, i, _LANE_INCLUDE) >= p:
            continue
        split = compounds.get(kw.parts[0]) if kw.is_single_token else None
        if split and uniform(cfg.seed, call_index, i, _LANE_SPLIT) < cfg.compound_split_prob:
            emitted.append(f"{split[0]} {split[1]}")
        else:
            emitted.append(kw.surface)
    if not emitted:
        return "A story."
    return f"A story about {', '.join(emitted)}."


def synth_generate(X: KeywordSet, cfg: SyntheticModelConfig, call_index: int,
                   compounds: Mapping[str, tuple[str, str]] = {}) -> GenerationResult:
    if not X:
        raise ValueError("synthetic generation needs at least one keyword")
    t0 = time.perf_counter()
    text = synth_text(X, cfg, call_index, compounds)
    return GenerationResult(text=text, latency_ms=(time.perf_counter() - t0) * 1000,
                            backend_id="synthetic")


def implied_instance_success(cfg: SyntheticModelConfig, m: int, strategy: str, K: int = 0) -> float:
    """Closed-form success probability in the independence regime.

    vanilla: p^m; rejection sampling with K retries: 1 - (1 - p^m)^(K+1);
    divide-and-conquer with K extra rounds: (1 - (1 - p)^(K+1))^m.
    """
    if not cfg.independent:
        raise ValueError("closed form only holds without bias, decay or compound splitting")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if K < 0:
        raise ValueError("K must be >= 0")
    p = cfg.base_coverage
    if strategy == "vanilla":
        return p ** m
    if strategy == "rj":
        return 1 - (1 - p ** m) ** (K + 1)
    return (1 - (1 - p) ** (K + 1)) ** m


class SyntheticBackend:
    """Backend adapter: reads the keyword hint from each request.

    The call index mixes the request's decoding seed with its attempt number,
    so each trial (seeded by the experiment runner) gets its own stream.
    Rewrite and judge requests return their source text unchanged.
    """

    supports_top_k = True

    def __init__(self, cfg: SyntheticModelConfig,
                 compounds: Optional[Mapping[str, tuple[str, str]]] = None,
                 policy: MatchPolicy = MatchPolicy()):
        self.cfg = cfg
        self.policy = policy
        self.compounds = {policy.normalize_token(k): v for k, v in (compounds or {}).items()}
        self.backend_id = "synthetic"
        self.calls = 0
        self._lock = threading.Lock()

    def call_index(self, request: GenerationRequest) -> int:
        seed = request.params.seed if request.params.seed is not None else 0
        return mix(seed, request.attempt)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        with self._lock:
            self.calls += 1
        if request.purpose != "generate":
            return GenerationResult(text=request.source_text, backend_id=self.backend_id,
                                    attempt=request.attempt)
        if not request.keywords:
            raise ValueError("synthetic backend needs the keyword hint on each request")
        X = KeywordSet(tuple(Keyword.parse(s, self.policy) for s in request.keywords), self.policy)
        result = synth_generate(X, self.cfg, self.call_index(request), self.compounds)
        return GenerationResult(text=result.text, latency_ms=result.latency_ms,
                                backend_id=self.backend_id, attempt=request.attempt)
