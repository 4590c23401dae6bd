import math

import numpy as np
import pytest

from radialplan.grid import make_grid
from radialplan.radial import CandidateSet, RadialParams, candidate_set
from radialplan.selection import (
    Mode,
    ScoredCandidates,
    SparsityConfig,
    dynamic_select,
    fuse_heads,
    normalize_scores,
    proxy_scores,
    retention_ratio,
    sample_positions,
    score_matrix,
    standardize,
    static_select,
    threshold_for,
    threshold_keep,
)

GRID = make_grid(6, 8, 4)


def static_cfg(gamma=2.0, near=0.6, far=0.2, **kw):
    return SparsityConfig(Mode.STATIC_RATIO, RadialParams(gamma, 1.0), 0.5, 0.5, near, far, 4, **kw)


def dynamic_cfg(gamma=2.0, near=-0.5, far=1.5):
    return SparsityConfig(Mode.DYNAMIC_THRESHOLD, RadialParams(gamma, 1.0), 0.5, 0.5, near, far, 4)


def test_mode_parse():
    assert Mode.parse("static") is Mode.STATIC_RATIO
    assert Mode.parse("dynamic_threshold") is Mode.DYNAMIC_THRESHOLD
    assert Mode.STATIC_RATIO.short == "static"
    with pytest.raises(ValueError):
        Mode.parse("fast")


def test_config_validation():
    with pytest.raises(ValueError):
        static_cfg(near=0.0)
    with pytest.raises(ValueError):
        static_cfg(far=1.2)
    with pytest.raises(ValueError):
        SparsityConfig(Mode.STATIC_RATIO, RadialParams(1, 1), 0.0, 0.5, 0.5, 0.5, 4)
    with pytest.raises(ValueError):
        SparsityConfig(Mode.DYNAMIC_THRESHOLD, RadialParams(1, 1), 0.5, 0.5, math.nan, 0.5, 4)
    # thresholds may be any real
    SparsityConfig(Mode.DYNAMIC_THRESHOLD, RadialParams(1, 1), 0.5, 0.5, -10.0, 8.0, 4)


def test_config_dict_roundtrip():
    cfg = static_cfg()
    assert SparsityConfig.from_dict(cfg.to_dict(), 4) == cfg


def test_retention_ratio_branches():
    cfg = static_cfg(gamma=2.0)
    assert retention_ratio(0, 1, cfg, GRID) == 1.0
    assert retention_ratio(0, 2, cfg, GRID) == 0.6  # L = 4 >= 4
    assert retention_ratio(0, 4, static_cfg(gamma=1.0), GRID) == 0.2  # L = 1 < 4
    with pytest.raises(ValueError):
        retention_ratio(0, 2, dynamic_cfg(), GRID)


def test_threshold_branches():
    cfg = dynamic_cfg(gamma=2.0)
    assert threshold_for(2, 2, cfg, GRID) == -math.inf
    assert threshold_for(2, 3, cfg, GRID) == -math.inf
    assert threshold_for(0, 2, cfg, GRID) == -0.5
    assert threshold_for(0, 4, dynamic_cfg(gamma=1.0), GRID) == 1.5
    with pytest.raises(ValueError):
        threshold_for(0, 2, static_cfg(), GRID)


def test_static_select_counts():
    cs = CandidateSet(0, 2, 4, 8)
    assert len(cs) == 52
    assert len(static_select(cs, 0.25, 7)) == 13
    assert len(static_select(cs, 1e-9, 7)) == 1
    assert static_select(cs, 1.0, 7) == set(cs.pairs())
    assert static_select(cs, 0.25, 7) <= set(cs.pairs())


def test_static_select_deterministic_and_seeded():
    cs = CandidateSet(1, 4, 3, 8)
    a = static_select(cs, 0.3, 11)
    assert a == static_select(cs, 0.3, 11)
    assert any(static_select(cs, 0.3, s) != a for s in range(12, 20))


def test_static_select_uses_frame_pair_stream():
    # different frame pairs with the same window draw different positions
    pa = sample_positions(52, 0.25, 5, 0, 2)
    pb = sample_positions(52, 0.25, 5, 2, 0)
    assert pa.size == pb.size == 13
    assert not np.array_equal(pa, pb)


def test_sample_positions_negative_and_large_seed():
    a = sample_positions(100, 0.1, -1, 0, 3)
    b = sample_positions(100, 0.1, (1 << 64) - 1, 0, 3)
    assert np.array_equal(a, b)


def test_sample_positions_errors():
    with pytest.raises(ValueError):
        sample_positions(0, 0.5, 0, 0, 1)
    with pytest.raises(ValueError):
        sample_positions(10, 0.0, 0, 0, 1)


def e(i, d=4):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def test_proxy_score_unit_basis():
    n = 8
    cs = CandidateSet(0, 2, 8, n)
    q = np.tile(e(0), (n, 1, 1))
    scored = proxy_scores(q, q, cs, fused_heads=1)
    assert np.allclose(scored.raw_scores, 0.5)
    k = np.tile(e(1), (n, 1, 1))
    assert np.allclose(proxy_scores(q, k, cs, 1).raw_scores, 0.0)


def test_proxy_score_single_head_matches_logit():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((6, 3, 5))
    k = rng.standard_normal((6, 3, 5))
    s = score_matrix(q, k, fused_heads=1)
    assert np.allclose(s, q[:, 0] @ k[:, 0].T / math.sqrt(5))


def test_head_fusion_average():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((5, 4, 3))
    k = rng.standard_normal((5, 4, 3))
    expect = sum(q[:, h] @ k[:, h].T for h in range(2)) / (2 * math.sqrt(3))
    assert np.allclose(score_matrix(q, k), expect)
    # fusion is capped at the available heads
    assert fuse_heads(q[:, :1], 2).shape == (5, 3)


def test_proxy_scores_dimension_mismatch():
    cs = CandidateSet(0, 2, 2, 4)
    with pytest.raises(ValueError):
        proxy_scores(np.zeros((4, 1, 3)), np.zeros((4, 1, 2)), cs)
    with pytest.raises(ValueError):
        proxy_scores(np.zeros((5, 1, 3)), np.zeros((5, 1, 3)), cs)


def scored_from(values):
    values = np.asarray(values, dtype=float)
    cs = CandidateSet(0, 2, 0, values.size)  # diagonal band: n pairs (u, u)
    return ScoredCandidates(cs, np.flatnonzero(cs.band()), values)


def test_normalize_examples():
    assert np.allclose(normalize_scores(scored_from([3.0, 3.0, 3.0])).normalized_scores, 0.0)
    assert np.allclose(normalize_scores(scored_from([0.0, 2.0])).normalized_scores, [-1.0, 1.0], atol=1e-7)
    assert normalize_scores(scored_from([5.0])).normalized_scores.tolist() == [0.0]


def test_standardize_moments():
    x = np.random.default_rng(2).normal(3, 2, 500)
    z, mu, sigma = standardize(x)
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-6
    assert math.isclose(mu, x.mean()) and math.isclose(sigma, x.std())


def test_dynamic_select_examples():
    s = normalize_scores(scored_from([0.0, 2.0, 0.0, 2.0]))
    assert dynamic_select(s, -math.inf) == {(0, 0), (1, 1), (2, 2), (3, 3)}
    assert dynamic_select(s, 0.0) == {(1, 1), (3, 3)}
    # fallback: no pair clears +inf, the argmax (earliest on ties) is kept
    assert dynamic_select(s, math.inf) == {(1, 1)}
    assert dynamic_select(s, math.inf, fallback_k=2) == {(1, 1), (3, 3)}


def test_dynamic_select_requires_normalized():
    with pytest.raises(ValueError):
        dynamic_select(scored_from([1.0, 2.0]), 0.0)


def test_threshold_keep_ge_and_empty():
    assert threshold_keep(np.array([0.5, 1.0, 1.5]), 1.0).tolist() == [1, 2]
    with pytest.raises(ValueError):
        threshold_keep(np.array([]), 0.0)


def test_scored_pair_list_matches_candidate_order():
    cs = candidate_set(0, 2, RadialParams(2.0, 1.0), GRID)
    rng = np.random.default_rng(0)
    f = rng.standard_normal((8, 1, 4))
    scored = proxy_scores(f, f, cs)
    assert scored.pair_list() == cs.pairs()
