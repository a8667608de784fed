import math

import pytest
from hypothesis import given, strategies as st

from lexcon.backend import DecodingParams, GenerationRequest
from lexcon.constraints import KeywordSet, normalize_and_tokenize, satisfied_flags
from lexcon.synthetic import (
    SyntheticBackend,
    SyntheticModelConfig,
    implied_instance_success,
    mix,
    synth_generate,
    synth_text,
    uniform,
)
from oracles import dnc_success, rj_success, three_sigma, vanilla_success

X5 = KeywordSet.of(["apple", "river", "stone", "cloud", "lamp"])


def flags(X, text):
    return satisfied_flags(X, normalize_and_tokenize(text))


def test_uniform_range_and_determinism():
    vals = [uniform(1, i, 0, 0) for i in range(1000)]
    assert all(0 <= v < 1 for v in vals)
    assert vals == [uniform(1, i, 0, 0) for i in range(1000)]
    assert abs(sum(vals) / len(vals) - 0.5) < 0.05


def test_mix_distinguishes_keys():
    assert len({mix(0, i) for i in range(1000)}) == 1000
    assert mix(1, 2) != mix(2, 1)


def test_full_coverage():
    cfg = SyntheticModelConfig(base_coverage=1.0)
    for i in range(20):
        assert all(flags(X5, synth_text(X5, cfg, i)))


def test_zero_coverage():
    cfg = SyntheticModelConfig(base_coverage=0.0)
    for i in range(20):
        assert not any(flags(X5, synth_text(X5, cfg, i)))
        assert synth_text(X5, cfg, i) == "A story."


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        synth_generate(KeywordSet(), SyntheticModelConfig(), 0)


@given(st.integers(0, 2 ** 32), st.integers(0, 2 ** 32))
def test_deterministic(seed, call):
    cfg = SyntheticModelConfig(seed=seed)
    assert synth_text(X5, cfg, call) == synth_text(X5, cfg, call)


def test_per_keyword_coverage_m15():
    X = KeywordSet.of([f"word{i}x" for i in range(15)])
    cfg = SyntheticModelConfig(base_coverage=0.8)
    n = 10000
    hits = [0] * 15
    for c in range(n):
        for i, ok in enumerate(flags(X, synth_text(X, cfg, c))):
            hits[i] += ok
    for h in hits:
        assert abs(h / n - 0.8) <= 0.02


def test_primacy_weights():
    cfg = SyntheticModelConfig(base_coverage=0.6, bias_mode="primacy", bias_strength=0.4)
    probs = cfg.inclusion_probabilities(10)
    assert probs[0] == pytest.approx(0.84) and probs[-1] == pytest.approx(0.6)
    assert all(a > b for a, b in zip(probs, probs[1:]))


def test_recency_weights():
    probs = SyntheticModelConfig(0.5, "recency", 1.0).inclusion_probabilities(3)
    assert probs == pytest.approx([0.5, 0.75, 1.0])


def test_decay_starts_after_five():
    cfg = SyntheticModelConfig(base_coverage=0.9, count_decay=0.5)
    assert cfg.inclusion_probabilities(5) == pytest.approx([0.9] * 5)
    assert cfg.inclusion_probabilities(7) == pytest.approx([0.225] * 7)


def test_probabilities_clamped():
    probs = SyntheticModelConfig(0.9, "primacy", 1.0).inclusion_probabilities(4)
    assert max(probs) == 1.0


@pytest.mark.parametrize("kw", [{"base_coverage": 1.1}, {"bias_mode": "middle"}, {"bias_strength": -1},
                                {"count_decay": 2}, {"compound_split_prob": -0.1}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SyntheticModelConfig(**kw)


def test_compound_split_emits_parts():
    X = KeywordSet.of(["jellyfish"])
    cfg = SyntheticModelConfig(base_coverage=1.0, compound_split_prob=1.0)
    assert synth_text(X, cfg, 0, {"jellyfish": ("jelly", "fish")}) == "A story about jelly fish."


def test_implied_values():
    cfg = SyntheticModelConfig(base_coverage=0.8)
    assert implied_instance_success(cfg, 15, "vanilla") == pytest.approx(0.0352, abs=1e-4)
    assert implied_instance_success(cfg, 15, "dnc", 4) == pytest.approx(0.9952, abs=1e-4)
    assert implied_instance_success(cfg, 15, "rj", 4) == pytest.approx(0.164, abs=1e-3)


def test_implied_matches_independent_oracle():
    for p in (0.1, 0.5, 0.8, 0.95):
        cfg = SyntheticModelConfig(base_coverage=p)
        for m in (1, 3, 15):
            assert implied_instance_success(cfg, m, "vanilla") == pytest.approx(vanilla_success(p, m))
            for K in range(6):
                assert implied_instance_success(cfg, m, "rj", K) == pytest.approx(rj_success(p, m, K))
                assert implied_instance_success(cfg, m, "dnc", K) == pytest.approx(dnc_success(p, m, K))


def test_implied_monotone_in_K_and_dnc_beats_rj():
    for p in [i / 20 for i in range(1, 20)]:
        cfg = SyntheticModelConfig(base_coverage=p)
        for m in (2, 5, 10, 15):
            rj = [implied_instance_success(cfg, m, "rj", K) for K in range(6)]
            dnc = [implied_instance_success(cfg, m, "dnc", K) for K in range(6)]
            assert rj == sorted(rj) and dnc == sorted(dnc)
            for K in range(1, 6):
                assert dnc[K] > rj[K]


def test_implied_requires_independence():
    with pytest.raises(ValueError):
        implied_instance_success(SyntheticModelConfig(bias_mode="primacy", bias_strength=0.2), 5, "rj", 1)


def test_backend_streams_keyed_by_seed_and_attempt():
    b = SyntheticBackend(SyntheticModelConfig(0.5))

    def gen(seed, attempt):
        r = GenerationRequest.from_prompt("p", params=DecodingParams(seed=seed), keywords=tuple(X5.surfaces),
                                          attempt=attempt)
        return b.generate(r).text

    assert gen(1, 0) == gen(1, 0)
    outs = {gen(1, a) for a in range(10)} | {gen(s, 0) for s in range(10)}
    assert len(outs) > 5


def test_backend_ignores_decoding_params():
    b = SyntheticBackend(SyntheticModelConfig(0.5))
    texts = {
        b.generate(GenerationRequest.from_prompt("p", params=DecodingParams(temperature=t, seed=3),
                                                 keywords=("apple", "river"))).text
        for t in (0.1, 0.5, 1.0)
    }
    assert len(texts) == 1


def test_backend_rewrite_returns_source():
    b = SyntheticBackend(SyntheticModelConfig(0.0))
    r = GenerationRequest.from_prompt("rewrite", purpose="rewrite", source_text="keep me")
    assert b.generate(r).text == "keep me"


def test_backend_needs_keywords():
    with pytest.raises(ValueError):
        SyntheticBackend(SyntheticModelConfig()).generate(GenerationRequest.from_prompt("p"))


def test_success_rate_within_three_sigma():
    X = KeywordSet.of([f"w{i}q" for i in range(4)])
    cfg = SyntheticModelConfig(0.7)
    n = 4000
    succ = sum(all(flags(X, synth_text(X, cfg, c))) for c in range(n))
    p = 0.7 ** 4
    assert abs(succ / n - p) <= three_sigma(p, n)
    assert math.isclose(implied_instance_success(cfg, 4, "vanilla"), p)
