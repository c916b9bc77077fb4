import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import oracle_backtrack, random_network
from segfix.fixations import (
    FixationPoint,
    FixationSet,
    ImagePoint,
    KStrategy,
    ShiftPolicy,
    backtrack,
    backtrack_levels,
    density_map,
    fixations_to_json,
    k_for_fraction,
    outlier_filter,
    seed_classification,
    seed_segmentation,
    top_k,
    transition_conv,
    transition_fc,
    transition_pool,
)
from segfix.network import ActivationRecord, LayerSpec, Network, center_tap, forward, map_center
from segfix.tensor import ConvParams, FCParams, PoolParams

POLICIES = list(ShiftPolicy)


def record_for(scores):
    scores = np.asarray(scores, dtype=float)
    return ActivationRecord(np.zeros((1,) + scores.shape[1:]), [scores])


# -- top_k ----------------------------------------------------------------------------------


def test_top_k_examples():
    idx, vals = top_k([3, 1, 2], 2)
    assert idx.tolist() == [0, 2] and vals.tolist() == [3, 2]
    assert top_k([5, 5], 1)[0].tolist() == [0]
    v = np.array([0.3, -1.0, 2.0, 0.3])
    idx, vals = top_k(v, 4)
    assert sorted(idx.tolist()) == [0, 1, 2, 3]
    assert vals.tolist() == sorted(v.tolist(), reverse=True)
    assert idx.tolist() == [2, 0, 3, 1]


def test_top_k_larger_than_n_returns_all():
    assert len(top_k([1.0, 2.0], 5)[0]) == 2


# -- seeds ----------------------------------------------------------------------------------


def test_seed_segmentation_uniform_class():
    scores = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    seeds = seed_segmentation(record_for(scores), 1)
    assert len(seeds) == 4
    assert all(s.channel == 1 and s.contribution == 1.0 for s in seeds)


def test_seed_segmentation_absent_label():
    scores = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    assert seed_segmentation(record_for(scores), 0) == []


def test_seed_segmentation_checkerboard():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    scores = np.stack([1 - board, board])
    seeds = seed_segmentation(record_for(scores), 1)
    assert {(s.row, s.col) for s in seeds} == {(r, c) for r in range(4) for c in range(4) if (r + c) % 2}


def test_seed_segmentation_rejects_bad_label():
    with pytest.raises(ValueError):
        seed_segmentation(record_for(np.zeros((2, 1, 1))), 2)


def test_seed_classification():
    rec = record_for(np.array([0.1, 0.9]).reshape(2, 1, 1))
    s = seed_classification(rec)
    assert (s.channel, s.contribution) == (1, 0.9)
    assert seed_classification(rec, 0).channel == 0
    with pytest.raises(ValueError):
        seed_classification(rec, 2)
    with pytest.raises(ValueError):
        seed_classification(record_for(np.zeros((2, 2, 2))))


# -- transitions ----------------------------------------------------------------------------


def test_transition_fc_examples():
    below = np.full((3, 1, 1), 5.0)
    out = transition_fc((0, 0, 0), FCParams(np.array([[1.0, 0.0, 2.0]]), [0.0]), below, 2)
    assert out == [((2, 0, 0), 10.0), ((0, 0, 0), 5.0)]
    onehot = np.zeros((4, 1, 1))
    onehot[2] = 1.0
    assert transition_fc((0, 0, 0), FCParams(np.ones((1, 4)), [0.0]), onehot, 1)[0][0] == (2, 0, 0)
    zeros = transition_fc((0, 0, 0), FCParams(np.ones((1, 4)), [9.0]), np.zeros((4, 1, 1)), 2)
    assert zeros == [((0, 0, 0), 0.0), ((1, 0, 0), 0.0)]


def test_transition_conv_pointwise_policies_agree():
    rng = np.random.default_rng(0)
    p = ConvParams(rng.normal(size=(2, 3, 1, 1)), np.zeros(2))
    below = rng.uniform(size=(3, 4, 4))
    outs = [transition_conv((1, 2, 3), p, below, 2, pol) for pol in POLICIES]
    assert outs[0] == outs[1] == outs[2]


def test_transition_conv_center_mass():
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    below = np.ones((1, 5, 5))
    outs = [transition_conv((0, 2, 2), ConvParams(kernel, [0.0]), below, 1, pol) for pol in POLICIES]
    assert outs[0] == outs[1] == outs[2] == [((0, 3, 3), 1.0)]


def test_transition_conv_corner_tap():
    kernel = np.ones((1, 2, 3, 3))
    below = np.ones((2, 5, 5))
    below[1, 1, 3] = 10.0  # top-right tap of the unit centred at (2, 2), channel 1
    p = ConvParams(kernel, [0.0], pad=1)
    full = transition_conv((0, 2, 2), p, below, 1, ShiftPolicy.FULL)
    none = transition_conv((0, 2, 2), p, below, 1, ShiftPolicy.NONE)
    assert full == [((1, 1, 3), 10.0)]
    assert none == [((1, 2, 2), 10.0)]
    dilated = ConvParams(kernel, [0.0], pad=1, dilation=1)
    assert transition_conv((0, 2, 2), dilated, below, 1, ShiftPolicy.PARTIAL) == full


def test_partial_shift_freezes_dilated_layers():
    kernel = np.ones((1, 1, 3, 3))
    below = np.ones((1, 7, 7))
    below[0, 1, 1] = 4.0
    p = ConvParams(kernel, [0.0], pad=2, dilation=2)
    assert transition_conv((0, 3, 3), p, below, 1, ShiftPolicy.PARTIAL) == [((0, 3, 3), 4.0)]
    assert transition_conv((0, 3, 3), p, below, 1, ShiftPolicy.FULL) == [((0, 1, 1), 4.0)]


def test_no_shift_merges_projected_taps():
    kernel = np.ones((1, 1, 3, 3))
    below = np.arange(25, dtype=float).reshape(1, 5, 5)
    out = transition_conv((0, 1, 1), ConvParams(kernel, [0.0]), below, 3, ShiftPolicy.NONE)
    assert out == [((0, 2, 2), math.fsum([18.0, 17.0, 16.0]))]


def test_transition_pool_examples():
    p = PoolParams("max", 2, 2)
    x = np.array([[[1.0, 2.0], [7.0, 4.0]]])
    _, arg = forward(Network([LayerSpec("pool", "p", p), LayerSpec("conv", "h", ConvParams(np.ones((1, 1, 1, 1)), [0.0]))], 1), x).argmax.popitem()
    out = transition_pool((0, 0, 0), p, x, 1)
    assert out == [((0, 1, 0), 7.0)]
    assert np.unravel_index(arg[0, 0, 0], x.shape) == out[0][0]
    assert transition_pool((0, 0, 0), PoolParams("avg", 2, 2), np.ones((1, 2, 2)), 2) == [
        ((0, 0, 0), 1.0),
        ((0, 0, 1), 1.0),
    ]
    window = np.array([[[4.0, 3.0], [1.0, 0.0]]])
    assert [c for c, _ in transition_pool((0, 0, 0), p, window, 2)] == [(0, 0, 0), (0, 0, 1)]


# -- k strategies -----------------------------------------------------------------------------


def test_k_for_fraction_examples():
    assert k_for_fraction(np.ones(10), 50) == 5
    assert k_for_fraction([0.9, 0.05, 0.05], 50) == 1
    assert k_for_fraction([0.4, 0.4, 0.2], 90) == 3
    assert k_for_fraction([0.0, -1.0], 50) == 1
    assert k_for_fraction([1.0, -5.0, 1.0], 100) == 2


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=40),
    st.floats(0.01, 100),
    st.floats(0.01, 100),
)
def test_k_for_fraction_monotone(values, a, b):
    lo, hi = sorted((a, b))
    assert k_for_fraction(values, lo) <= k_for_fraction(values, hi)


def test_k_strategy_parse_and_choose():
    assert KStrategy.parse("fixed:3") == KStrategy.fixed(3)
    assert KStrategy.parse("fraction:50") == KStrategy.capture(50, 16)
    assert KStrategy.parse("resolution:2:8") == KStrategy.resolution(2, 8)
    assert KStrategy.resolution(1).choose(np.ones(4), 16, 4) == 4
    assert KStrategy.resolution(2).choose(np.ones(4), 16, 4) == 4  # capped
    assert KStrategy.resolution(1).choose(np.ones(4), 9, 4) == 3  # ceil
    assert KStrategy.capture(100, 3).choose(np.ones(10), 1, 1) == 3
    for bad in ("fixed:0", "fraction:0", "fraction:101", "resolution:x", "best:2", "fixed"):
        with pytest.raises(ValueError):
            KStrategy.parse(bad)


# -- backtracking -----------------------------------------------------------------------------


def test_identity_network_returns_seeds():
    net = Network([LayerSpec("conv", "id", ConvParams(np.ones((1, 1, 1, 1)), [0.0]))], 1)
    rec = forward(net, np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    seeds = seed_segmentation(rec, 0)
    fs = backtrack(net, rec, seeds)
    assert [(p.row, p.col, p.contribution) for p in fs.points] == [(0, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 4.0)]


def _conv_only_net(rng):
    while True:
        net, image = random_network(rng, max_layers=5, pools=False)
        if len(net.layers) > 1:
            return net, image


@pytest.mark.parametrize("seed", range(15))
def test_no_shift_k1_single_path_per_seed(seed):
    net, image = _conv_only_net(np.random.default_rng(seed))
    rec = forward(net, image)
    for s in [FixationPoint(rec.depth, 0, r, c, 1.0) for r in range(rec.scores.shape[1]) for c in range(rec.scores.shape[2])]:
        levels = backtrack_levels(net, rec, [s], KStrategy.fixed(1), ShiftPolicy.NONE)
        assert len(levels[0]) <= 1
        if levels[0]:
            (_, r, c), = levels[0]
            assert (r, c) == map_center(net, rec, rec.depth, s.row, s.col)


@pytest.mark.parametrize("seed", range(15))
def test_no_shift_follows_mapped_center_at_every_level(seed):
    net, image = _conv_only_net(np.random.default_rng(100 + seed))
    rec = forward(net, image)
    seed_pt = FixationPoint(rec.depth, 1, rec.scores.shape[1] // 2, rec.scores.shape[2] // 2, 1.0)
    levels = backtrack_levels(net, rec, [seed_pt], KStrategy.fixed(3), ShiftPolicy.NONE)
    for level, units in enumerate(levels):
        r0, c0 = _center_at(net, rec, level, seed_pt)
        assert all((r, c) == (r0, c0) for _, r, c in units)
    assert _center_at(net, rec, 0, seed_pt) == map_center(net, rec, rec.depth, seed_pt.row, seed_pt.col)


def _center_at(net, rec, level, seed_pt):
    # follow central taps from the scores down to ``level``
    r, c = seed_pt.row, seed_pt.col
    for i in range(rec.depth - 1, level - 1, -1):
        r, c = center_tap(net.layers[i].params, r, c, rec.level(i).shape)
    return r, c


def test_conv_relu_pool_conv_matches_oracle():
    rng = np.random.default_rng(11)
    layers = [
        LayerSpec("conv", "c1", ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), pad=1)),
        LayerSpec("relu", "r1"),
        LayerSpec("pool", "p1", PoolParams("max", 2, 2)),
        LayerSpec("conv", "head", ConvParams(rng.normal(size=(2, 3, 1, 1)), rng.normal(size=2))),
    ]
    net = Network(layers, 2)
    rec = forward(net, rng.uniform(size=(2, 8, 8)))
    seeds = seed_segmentation(rec, 0) or seed_segmentation(rec, 1)
    for policy in POLICIES:
        got = backtrack(net, rec, seeds, KStrategy.fixed(2), policy)
        want = oracle_backtrack(net, rec, seeds, KStrategy.fixed(2), policy)
        assert {(p.row, p.col): p.contribution for p in got.points} == want


STRATEGIES = [KStrategy.fixed(1), KStrategy.fixed(2), KStrategy.capture(60, 4), KStrategy.resolution(1)]


@pytest.mark.parametrize("seed", range(30))
def test_backtrack_matches_oracle_random_nets(seed):
    rng = np.random.default_rng(1000 + seed)
    net, image = random_network(rng)
    rec = forward(net, image)
    label = int(np.argmax(rec.scores.sum(axis=(1, 2))))
    seeds = seed_segmentation(rec, label)
    strategy = STRATEGIES[seed % len(STRATEGIES)]
    for policy in POLICIES:
        got = backtrack(net, rec, seeds, strategy, policy)
        want = oracle_backtrack(net, rec, seeds, strategy, policy)
        assert {(p.row, p.col): p.contribution for p in got.points} == want


def test_fc_layer_matches_oracle():
    rng = np.random.default_rng(5)
    layers = [
        LayerSpec("conv", "c1", ConvParams(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2))),
        LayerSpec("relu", "r1"),
        LayerSpec("fc", "fc", FCParams(rng.normal(size=(4, 18)), rng.normal(size=4))),
        LayerSpec("conv", "head", ConvParams(rng.normal(size=(3, 4, 1, 1)), rng.normal(size=3))),
    ]
    net = Network(layers, 1)
    rec = forward(net, rng.uniform(size=(1, 5, 5)))
    seeds = [seed_classification(rec)]
    got = backtrack(net, rec, seeds, KStrategy.fixed(3))
    assert {(p.row, p.col): p.contribution for p in got.points} == oracle_backtrack(
        net, rec, seeds, KStrategy.fixed(3), ShiftPolicy.FULL
    )


@pytest.mark.parametrize("seed", range(20))
def test_fixation_count_bound_and_bounds(seed):
    rng = np.random.default_rng(2000 + seed)
    net, image = random_network(rng)
    rec = forward(net, image)
    k = int(rng.integers(1, 4))
    policy = POLICIES[seed % 3]
    bound = k ** sum(layer.kind in ("conv", "pool", "fc") for layer in net.layers)
    for r in range(rec.scores.shape[1]):
        for c in range(rec.scores.shape[2]):
            s = FixationPoint(rec.depth, 0, r, c, float(rec.scores[0, r, c]))
            levels = backtrack_levels(net, rec, [s], KStrategy.fixed(k), policy)
            assert len(levels[0]) <= bound
            for level, units in enumerate(levels):
                shape = rec.level(level).shape
                assert all(0 <= z < shape[0] and 0 <= y < shape[1] and 0 <= x < shape[2] for z, y, x in units)


def test_relu_drops_dead_units():
    layers = [
        LayerSpec("conv", "c1", ConvParams(np.array([1.0, -1.0]).reshape(2, 1, 1, 1), [0.0, 0.0])),
        LayerSpec("relu", "r1"),
        LayerSpec("conv", "head", ConvParams(np.ones((1, 2, 1, 1)), [0.0])),
    ]
    net = Network(layers, 1)
    rec = forward(net, np.ones((1, 1, 1)))
    levels = backtrack_levels(net, rec, seed_segmentation(rec, 0), KStrategy.fixed(2))
    assert set(levels[1]) == {(0, 0, 0)}
    assert levels[0] == {(0, 0, 0): 1.0}


def test_thread_count_does_not_change_result():
    net, image = random_network(np.random.default_rng(9), max_layers=5, size=12)
    rec = forward(net, image)
    seeds = seed_segmentation(rec, int(np.argmax(rec.scores.sum(axis=(1, 2)))))
    a = backtrack(net, rec, seeds, KStrategy.fixed(3), ShiftPolicy.FULL, workers=1)
    b = backtrack(net, rec, seeds, KStrategy.fixed(3), ShiftPolicy.FULL, workers=4)
    assert fixations_to_json([a]) == fixations_to_json([b])


def test_json_export():
    text = fixations_to_json([FixationSet(2, [ImagePoint(3, 4, 0.5)])])
    assert '"x": 4' in text and '"y": 3' in text and '"label": 2' in text


# -- density and outliers -----------------------------------------------------------------------


def test_density_single_peak():
    m = density_map([ImagePoint(3, 5, 1.0)], 10, 12, 1.5)
    assert m.shape == (1, 10, 12)
    assert np.unravel_index(np.argmax(m), m.shape) == (0, 3, 5)
    assert m.max() == 1.0


def test_density_empty():
    assert not density_map([], 4, 4, 1.0).any()


def test_density_two_far_points():
    sigma = 1.0
    m = density_map([ImagePoint(5, 5, 1.0), ImagePoint(5, 20, 1.0)], 11, 26, sigma)[0]
    assert m[5, 5] == pytest.approx(m[5, 20], abs=1e-12)
    assert m[5, 5] > m[5, 4] and m[5, 20] > m[5, 21]
    assert m[5, 12] < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_density_mass_equals_count(seed):
    rng = np.random.default_rng(seed)
    pts = [ImagePoint(int(r), int(c), 1.0) for r, c in rng.integers(0, 16, size=(int(rng.integers(1, 20)), 2))]
    m = density_map(pts, 16, 16, float(rng.uniform(0.5, 3.0)), normalize=False)
    assert abs(m.sum() - len(pts)) <= 1e-9


def test_density_rejects_bad_sigma():
    with pytest.raises(ValueError):
        density_map([], 2, 2, 0.0)


def test_outlier_filter_examples():
    same = [ImagePoint(4, 4, 1.0)] * 5
    assert outlier_filter(same) == same
    rng = np.random.default_rng(0)
    cluster = [ImagePoint(int(10 + r), int(10 + c), 1.0) for r, c in rng.integers(-1, 2, size=(10, 2))]
    lone = ImagePoint(63, 63, 1.0)
    kept = outlier_filter(cluster + [lone])
    assert lone not in kept and len(kept) >= 1
    pair = [ImagePoint(0, 0, 1.0), ImagePoint(50, 50, 1.0)]
    assert outlier_filter(pair) == pair
