import math

import numpy as np
import pytest

from radialplan.grid import make_grid
from radialplan.radial import (
    RadialParams,
    band_size,
    base_span,
    candidate_set,
    decay_length,
    frame_retained,
    group_index,
    is_near,
    receptive_field,
    round_half_away,
    split_factor,
    window_width,
)
import oracle


@pytest.mark.parametrize("t, b", [(1, 1), (3, 2), (8, 4), (7, 3), (1 << 40, 41)])
def test_group_index(t, b):
    assert group_index(t) == b


def test_group_index_rejects_zero():
    with pytest.raises(ValueError):
        group_index(0)


@pytest.mark.parametrize("n, l0", [(8, 8), (10, 16), (1, 1), (3667, 4096)])
def test_base_span(n, l0):
    assert base_span(n) == l0


@pytest.mark.parametrize("t, gamma, expect", [(2, 2.0, 4.0), (1, 1.0, 4.0), (4, 1.0, 1.0)])
def test_decay_length(t, gamma, expect):
    assert decay_length(t, RadialParams(gamma, 1.0), 8) == expect


def test_window_width_examples():
    g = make_grid(6, 8, 4)
    assert window_width(3, 3, RadialParams(1.0, 1.0), g) == 8
    assert window_width(0, 1, RadialParams(1.0, 1.0), g) == 8
    assert window_width(0, 2, RadialParams(2.0, 1.0), g) == 4
    assert window_width(0, 4, RadialParams(1.0, 1.0), g) == 4  # clamped up to B_s


def test_round_half_away():
    assert [round_half_away(x) for x in (0.5, 1.5, 2.5, -0.5, -1.5, 2.49)] == [1, 2, 3, -1, -2, 2]


def test_window_uses_half_away_rounding():
    # L = 16/4 * 2.625 = 10.5 -> 11 (banker's rounding would give 10)
    g = make_grid(4, 16, 2)
    assert window_width(0, 2, RadialParams(2.625, 1.0), g) == 11


@pytest.mark.parametrize("t, lam, sf", [(2, 1.0, 2), (2, 0.3, 6), (2, 4.0, 1), (2, 100.0, 1), (3, 1.0, 2)])
def test_split_factor(t, lam, sf):
    assert split_factor(t, RadialParams(1.0, lam), 4, 8) == sf


def test_split_factor_disabled():
    p = RadialParams(1.0, 0.1, split_rule=False)
    assert all(split_factor(t, p, 4, 8) == 1 for t in range(1, 50))


def test_frame_retained():
    p = RadialParams(1.0, 1.0)
    assert frame_retained(2, p, 4, 8)
    assert not frame_retained(3, p, 4, 8)
    assert frame_retained(1, RadialParams(1.0, 0.1), 4, 8)  # adjacent frames always kept
    big = RadialParams(1.0, 1e6)
    assert all(frame_retained(t, big, 4, 8) for t in range(1, 40))
    with pytest.raises(ValueError):
        frame_retained(0, p, 4, 8)


def test_is_near_branch():
    g = make_grid(6, 8, 4)
    assert is_near(2, RadialParams(2.0, 1.0), g)
    assert not is_near(4, RadialParams(1.0, 1.0), g)


def test_candidate_set_sizes():
    g = make_grid(6, 8, 4)
    cs = candidate_set(0, 2, RadialParams(2.0, 1.0), g)
    assert cs.window_width == 4 and len(cs) == 52
    assert len(cs.pairs()) == 52
    assert all(abs(u - v) <= 4 for u, v in cs.pairs())
    full = candidate_set(0, 1, RadialParams(2.0, 1.0), g)
    assert len(full) == 64


def test_candidate_set_pruned_is_empty():
    g = make_grid(6, 8, 4)
    cs = candidate_set(0, 3, RadialParams(1.0, 1.0), g)
    assert not cs.retained and len(cs) == 0 and cs.pairs() == [] and cs.flat_indices().size == 0


def test_candidate_set_rejects_same_frame_and_out_of_range():
    g = make_grid(3, 8, 4)
    with pytest.raises(ValueError):
        candidate_set(1, 1, RadialParams(1.0, 1.0), g)
    with pytest.raises(IndexError):
        candidate_set(0, 3, RadialParams(1.0, 1.0), g)


def test_candidate_pairs_row_major():
    g = make_grid(4, 6, 2)
    pairs = candidate_set(0, 2, RadialParams(1.0, 5.0), g).pairs()
    assert pairs == sorted(pairs)


@pytest.mark.parametrize("n", [1, 5, 8, 13])
def test_band_size_formula(n):
    for w in range(0, n + 3):
        assert band_size(n, w) == sum(1 for u in range(n) for v in range(n) if abs(u - v) <= w)


def test_candidate_set_matches_enumerator():
    rng = np.random.default_rng(3)
    for nf in range(2, 9):
        for nt in (4, 7, 12, 16):
            g = make_grid(nf, nt, 4)
            for _ in range(6):
                p = RadialParams(float(rng.uniform(0.5, 3.5)), float(rng.uniform(0.05, 2.0)))
                for i in range(nf):
                    for j in range(nf):
                        if i == j:
                            continue
                        keep, window, _ = oracle.frame_pair_plan(i, j, nt, 4, p.decay_factor, p.long_range_factor)
                        expect = oracle.candidates(nt, window) if keep else []
                        assert candidate_set(i, j, p, g).pairs() == expect


def test_receptive_field_counts_all_frames():
    g = make_grid(3, 4, 2)
    # every pair has the full window at t <= 1; t = 2 has L = 4/4*1 = 1 -> w = max(2, 1) = 2
    p = RadialParams(1.0, 1.0, split_rule=False)
    per_query = (3 * 16 + 4 * 16 + 2 * band_size(4, 2)) / (3 * 4)
    assert math.isclose(receptive_field(g, p), per_query)
