"""Instance success, keyword coverage and their aggregations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .constraints import KeywordSet, TokenizedText, missing_keywords, satisfied_flags

Z95 = 1.959963984540054


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class KeywordResult:
    keyword: str
    satisfied: bool
    position: int


@dataclass(frozen=True)
class TrialMetrics:
    instance_success: int
    keyword_coverage: Fraction
    per_keyword: tuple[KeywordResult, ...]

    @property
    def m(self) -> int:
        return len(self.per_keyword)

    def to_dict(self) -> dict:
        return {
            "instance_success": self.instance_success,
            "keyword_coverage": float(self.keyword_coverage),
            "satisfied_count": sum(r.satisfied for r in self.per_keyword),
            "per_keyword": [
                {"keyword": r.keyword, "satisfied": r.satisfied, "position": r.position}
                for r in self.per_keyword
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialMetrics":
        per = tuple(
            KeywordResult(r["keyword"], bool(r["satisfied"]), int(r["position"]))
            for r in d["per_keyword"]
        )
        return cls.from_flags(per)

    @classmethod
    def from_flags(cls, per_keyword: Sequence[KeywordResult]) -> "TrialMetrics":
        per_keyword = tuple(per_keyword)
        if not per_keyword:
            raise MetricError("keyword coverage is undefined for an empty keyword set")
        if sorted(r.position for r in per_keyword) != list(range(len(per_keyword))):
            raise MetricError("keyword positions must be a permutation of 0..m-1")
        hits = sum(r.satisfied for r in per_keyword)
        cov = Fraction(hits, len(per_keyword))
        return cls(int(hits == len(per_keyword)), cov, per_keyword)


def instance_success(X: KeywordSet, text: TokenizedText) -> int:
    return int(len(missing_keywords(X, text)) == 0)


def keyword_coverage(X: KeywordSet, text: TokenizedText) -> Fraction:
    if not X:
        raise MetricError("keyword coverage is undefined for an empty keyword set")
    return Fraction(sum(satisfied_flags(X, text)), len(X))


def score(X: KeywordSet, text: TokenizedText) -> TrialMetrics:
    """Per-trial metrics; keyword positions follow the order of ``X``."""
    flags = satisfied_flags(X, text)
    return TrialMetrics.from_flags(
        KeywordResult(kw.surface, ok, i) for i, (kw, ok) in enumerate(zip(X, flags))
    )


def positional_coverage(trials: Sequence[TrialMetrics], m: int) -> list[float]:
    if not trials:
        raise MetricError("positional coverage needs at least one trial")
    hits = [0] * m
    for t in trials:
        if t.m != m:
            raise MetricError(f"trial has {t.m} keywords, expected {m}")
        for r in t.per_keyword:
            hits[r.position] += r.satisfied
    return [h / len(trials) for h in hits]


@dataclass(frozen=True)
class AggregateSummary:
    n_trials: int
    mean_instance_success: float
    mean_keyword_coverage: float
    error_rate: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "mean_success": self.mean_instance_success,
            "mean_coverage": self.mean_keyword_coverage,
            "error_rate": self.error_rate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def proportion_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Normal-approximation interval with a 1/(2n) continuity term, clipped to [0, 1].

    The continuity term keeps the interval from collapsing to a point at 0 or 1.
    """
    p = successes / n
    half = z * math.sqrt(p * (1 - p) / n) + 1 / (2 * n)
    return max(0.0, p - half), min(1.0, p + half)


def aggregate(trials: Sequence[TrialMetrics]) -> AggregateSummary:
    if not trials:
        raise MetricError("cannot aggregate zero trials")
    n = len(trials)
    succ = sum(t.instance_success for t in trials)
    cov = math.fsum(float(t.keyword_coverage) for t in trials) / n
    lo, hi = proportion_interval(succ, n)
    mean = succ / n
    return AggregateSummary(n, mean, cov, 1 - mean, lo, hi)


def fitted_slope(values: Sequence[float]) -> float:
    """Least-squares slope of ``values`` against their index."""
    y = np.asarray(values, dtype=float)
    x = np.arange(len(y), dtype=float)
    x -= x.mean()
    return float(x @ (y - y.mean()) / (x @ x))


@dataclass(frozen=True)
class TrendTest:
    slope: float
    p_negative: float
    p_positive: float
    p_two_sided: float


def positional_trend(
    rates: Sequence[float], n_permutations: int = 2000, seed: Optional[int] = 0
) -> TrendTest:
    """Least-squares slope of positional coverage with permutation p-values.

    Under the no-bias null the coverage values are exchangeable across
    positions, so p-values come from randomly relabelling positions. Each
    p-value uses the (count + 1) / (permutations + 1) convention.
    """
    y = np.asarray(rates, dtype=float)
    if len(y) < 2:
        raise MetricError("need at least two positions for a trend")
    x = np.arange(len(y), dtype=float)
    x -= x.mean()
    xx = x @ x
    obs = float(x @ (y - y.mean()) / xx)
    rng = np.random.default_rng(seed)
    perms = rng.permuted(np.tile(y, (n_permutations, 1)), axis=1)
    null = (perms - perms.mean(axis=1, keepdims=True)) @ x / xx
    eps = 1e-12
    le = int(np.sum(null <= obs + eps))
    ge = int(np.sum(null >= obs - eps))
    ab = int(np.sum(np.abs(null) >= abs(obs) - eps))
    denom = n_permutations + 1
    return TrendTest(obs, (le + 1) / denom, (ge + 1) / denom, (ab + 1) / denom)
