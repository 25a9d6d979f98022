import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmpt.metrics import (MetricsCurve, MetricsError, auc, bias_sweep, check_curve, evaluate_scores,
                          open_world_accuracy, predict_open_world, predict_open_world_batch, summarize)
from mmpt.scores import ScoreTable
from mmpt.space import Composition, assign_splits, build_space

from oracles import biased_argmax, dense_sweep, oracle_summary


def hand_space():
    return assign_splits(build_space(["a0", "a1", "a2"], ["o0", "o1", "o2"]),
                         seen=[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (2, 0)],
                         unseen_test=[(1, 2), (2, 1), (2, 2)])


def hand_table():
    """Six samples on a 3x3 grid, values in sixteenths so every sum is exact.

    In every row the best seen cell has a lower flat index than the best unseen
    cell, so the brute-force tie rule agrees with the sweep at exact gaps.
    """
    cells = [
        {(0, 0): 10, (1, 2): 6},
        {(1, 1): 8, (0, 0): 3, (2, 2): 7},
        {(1, 0): 9, (2, 1): 5},
        {(0, 2): 7, (1, 2): 6},
        {(2, 0): 5, (2, 2): 9},
        {(0, 1): 12, (2, 2): 8, (2, 1): 4},
    ]
    grid = np.ones((6, 3, 3))
    for i, row in enumerate(cells):
        for (a, o), v in row.items():
            grid[i, a, o] = v
    labels = [(0, 0), (1, 1), (0, 1), (1, 2), (2, 2), (2, 1)]
    return grid / 16, labels


# hand-derived: gaps {-1/4, 1/16, 1/4}; curve (s, u) = (2/3,0),(2/3,0),(2/3,1/3),(1/3,2/3),(0,2/3)
HAND_CURVE = [(-2.5, 2 / 3, 0.0), (-0.25, 2 / 3, 0.0), (0.0625, 2 / 3, 1 / 3), (0.25, 1 / 3, 2 / 3), (2.5, 0.0, 2 / 3)]
HAND_SUMMARY = {"S": 200 / 3, "U": 200 / 3, "HM": 400 / 9, "AUC": 700 / 18}


def random_instance(rng, n_max=10, side_max=5):
    na, no = rng.integers(2, side_max + 1, size=2)
    cells = [(a, o) for a in range(na) for o in range(no)]
    order = rng.permutation(len(cells))
    n_seen = rng.integers(1, len(cells))
    seen = [cells[i] for i in order[:n_seen]]
    unseen = [cells[i] for i in order[n_seen:]]
    space = assign_splits(build_space([f"a{i}" for i in range(na)], [f"o{i}" for i in range(no)]),
                          seen=seen, unseen_test=unseen)
    n = int(rng.integers(2, n_max + 1))
    labels = [seen[rng.integers(len(seen))] for _ in range(n // 2)]
    labels += [unseen[rng.integers(len(unseen))] for _ in range(n - n // 2)]
    if rng.random() < 0.5:
        grid = rng.random((n, na, no))
    else:
        grid = rng.random((n, na))[:, :, None] * rng.random((n, no))[:, None, :]
    return space, grid, labels


# ---------------------------------------------------------------- open-world prediction


def test_one_hot_factors_pick_their_pair():
    ra, ro = np.zeros(4), np.zeros(5)
    ra[2], ro[3] = 1, 1
    assert predict_open_world((ra, ro)) == Composition(2, 3)


def test_uniform_grid_ties_to_first_cell():
    assert predict_open_world(np.full((3, 4), 0.25)) == Composition(0, 0)


def test_large_grid_matches_brute_force():
    rng = np.random.default_rng(3)
    grid = rng.random((115, 245))
    assert grid.size == 28175
    k = biased_argmax(grid, np.zeros_like(grid, dtype=bool), 0.0)
    assert predict_open_world(grid) == Composition(*divmod(k, 245))


def test_factorized_argmax_equals_marginal_argmax():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ra, ro = rng.random(6) + 1e-3, rng.random(7) + 1e-3
        assert predict_open_world((ra, ro)) == Composition(int(np.argmax(ra)), int(np.argmax(ro)))


def test_empty_grid_rejected():
    with pytest.raises(MetricsError):
        predict_open_world(np.zeros((0, 3)))


def test_batch_prediction_matches_single():
    rng = np.random.default_rng(1)
    grids = rng.random((8, 3, 4))
    batch = predict_open_world_batch(grids)
    for g, p in zip(grids, batch):
        assert predict_open_world(g).as_tuple() == tuple(p)


# ---------------------------------------------------------------- sweep


def test_hand_table_curve_is_hand_derived():
    grid, labels = hand_table()
    curve = bias_sweep(grid, labels, hand_space())
    assert len(curve) == len(HAND_CURVE)
    for got, want in zip(curve.points(), HAND_CURVE):
        assert got == pytest.approx(want, abs=1e-12)


def test_hand_table_summary_is_hand_derived():
    grid, labels = hand_table()
    _, s = evaluate_scores(grid, hand_space(), labels)
    for k, v in HAND_SUMMARY.items():
        assert getattr(s, k) == pytest.approx(v, abs=1e-9)


def test_hand_table_curve_matches_dense_oracle_at_shared_biases():
    grid, labels = hand_table()
    space = hand_space()
    curve = bias_sweep(grid, labels, space)
    biases, seen, unseen = dense_sweep(grid, labels, space.seen_mask(), n_dense=10_001)
    for b, s, u in curve.points():
        j = int(np.searchsorted(biases, b))
        assert biases[j] == b
        assert (seen[j], unseen[j]) == pytest.approx((s, u), abs=1e-12)


def test_random_instances_match_dense_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(60):
        space, grid, labels = random_instance(rng)
        _, s = evaluate_scores(grid, space, labels)
        _, seen, unseen = dense_sweep(grid, labels, space.seen_mask(), n_dense=2_001)
        want = oracle_summary(seen, unseen)
        for k in want:
            assert getattr(s, k) == pytest.approx(want[k], abs=1e-9)


def test_sentinels_reach_both_extremes():
    rng = np.random.default_rng(5)
    space, grid, labels = random_instance(rng)
    curve = bias_sweep(grid, labels, space)
    assert curve.seen[-1] == 0.0
    assert curve.unseen[0] == 0.0
    assert curve.bias[0] < 0 < curve.bias[-1]


def test_no_unseen_samples_is_a_protocol_error():
    grid, labels = hand_table()
    with pytest.raises(MetricsError, match="without unseen-labeled samples"):
        bias_sweep(grid[:3], labels[:3], hand_space())


def test_no_seen_samples_is_a_protocol_error():
    grid, labels = hand_table()
    with pytest.raises(MetricsError, match="without seen-labeled samples"):
        bias_sweep(grid[3:], labels[3:], hand_space())


def test_label_outside_both_splits_rejected():
    space = assign_splits(build_space(["a", "b"], ["x", "y"]), seen=[(0, 0), (1, 1)], unseen_test=[(0, 1)])
    with pytest.raises(MetricsError, match="outside"):
        bias_sweep(np.ones((2, 2, 2)), [(0, 0), (1, 0)], space)


def test_shape_mismatch_rejected():
    grid, labels = hand_table()
    with pytest.raises(MetricsError):
        bias_sweep(grid[:, :2], labels, hand_space())


def test_nonfinite_scores_rejected():
    grid, labels = hand_table()
    grid[0, 0, 0] = np.nan
    with pytest.raises(MetricsError, match="non-finite"):
        bias_sweep(grid, labels, hand_space())


def test_score_table_input_uses_its_labels():
    grid, labels = hand_table()
    table = ScoreTable(["a0", "a1", "a2"], ["o0", "o1", "o2"], list(range(6)), labels=labels, grid=grid)
    _, s = evaluate_scores(table, hand_space())
    assert s.AUC == pytest.approx(HAND_SUMMARY["AUC"], abs=1e-9)


# ---------------------------------------------------------------- auc / summary


def test_constant_curve_auc_is_a_rectangle():
    s0, u0 = 0.6, 0.4
    curve = MetricsCurve(np.array([-1.0, 0.0, 1.0]), np.array([s0, s0, 0.0]), np.array([0.0, u0, u0]))
    assert auc(curve) == pytest.approx(100 * s0 * u0, abs=1e-9)


def test_perfect_model_auc_is_100():
    curve = MetricsCurve(np.array([-1.0, 0.0, 1.0]), np.array([1.0, 1.0, 0.0]), np.array([0.0, 1.0, 1.0]))
    assert auc(curve) == pytest.approx(100.0)
    assert summarize(curve).AUC == pytest.approx(100.0)


def test_single_point_auc_warns_and_is_zero():
    curve = MetricsCurve(np.array([0.0]), np.array([0.5]), np.array([0.5]))
    with pytest.warns(RuntimeWarning):
        assert auc(curve) == 0.0


def test_three_point_summary():
    curve = MetricsCurve(np.array([-1.0, 0.0, 1.0]), np.array([1.0, 0.5, 0.0]), np.array([0.0, 0.5, 1.0]))
    s = summarize(curve)
    assert (s.S, s.U, s.HM) == pytest.approx((100.0, 100.0, 50.0))
    assert s.AUC == pytest.approx(oracle_summary(curve.seen, curve.unseen)["AUC"])


def test_all_zero_summary():
    z = np.zeros(3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        s = summarize(MetricsCurve(np.array([-1.0, 0.0, 1.0]), z, z))
    assert (s.S, s.U, s.HM, s.AUC) == (0.0, 0.0, 0.0, 0.0)


def test_auc_bound_is_tight_on_a_full_rectangle():
    curve = MetricsCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    s = summarize(curve)
    assert s.AUC == pytest.approx(s.S * s.U / 100)


def test_check_curve_flags_non_monotone():
    with pytest.raises(MetricsError):
        check_curve(MetricsCurve(np.array([0.0, 1.0]), np.array([0.2, 0.5]), np.array([0.0, 1.0])))


def test_open_world_accuracy_split():
    grid, labels = hand_table()
    acc = open_world_accuracy(grid, labels, hand_space())
    # bias 0 sits between the gaps 1/16 and 1/4 except sample 5 (gap -1/4)
    assert acc["seen"] == pytest.approx(2 / 3)
    assert acc["unseen"] == pytest.approx(1 / 3)


def test_curve_csv(tmp_path):
    grid, labels = hand_table()
    curve = bias_sweep(grid, labels, hand_space())
    curve.save_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "bias,seen,unseen"
    assert len(lines) == 1 + len(curve)


# ---------------------------------------------------------------- properties


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_instance(np.random.default_rng(seed))


@settings(max_examples=60, deadline=None)
@given(instances())
def test_curve_monotone_and_bounded(inst):
    space, grid, labels = inst
    curve, s = evaluate_scores(grid, space, labels)
    assert np.all(np.diff(curve.seen) <= 0) and np.all(np.diff(curve.unseen) >= 0)
    assert 0 <= s.HM <= 100 and 0 <= s.S <= 100 and 0 <= s.U <= 100
    assert 0 <= s.AUC <= s.S * s.U / 100 + 1e-9


@settings(max_examples=40, deadline=None)
@given(instances(), st.floats(0.01, 100.0))
def test_positive_rescaling_keeps_accuracies(inst, c):
    space, grid, labels = inst
    a = bias_sweep(grid, labels, space)
    b = bias_sweep(grid * c, labels, space)
    assert np.array_equal(a.seen, b.seen) and np.array_equal(a.unseen, b.unseen)


@settings(max_examples=40, deadline=None)
@given(instances())
def test_hm_never_exceeds_pointwise_bound(inst):
    space, grid, labels = inst
    curve = bias_sweep(grid, labels, space)
    s = summarize(curve)
    bound = max(2 * x * y / (x + y) if x + y else 0.0 for x, y in zip(curve.seen, curve.unseen))
    assert s.HM == pytest.approx(100 * bound)
