import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from edgestorm import evaluation as E
from edgestorm.errors import RejectedInput


def optimal_tp(pred, gt, tol):
    """Reference maximum-cardinality matching via an assignment solver."""
    p = np.argwhere(pred)
    g = np.argwhere(gt)
    if len(p) == 0 or len(g) == 0:
        return 0
    d2 = ((p[:, None, :] - g[None, :, :]) ** 2).sum(-1)
    ok = d2 <= tol * tol
    rows, cols = linear_sum_assignment(-ok.astype(float))
    return int(ok[rows, cols].sum())


def brute_tp(pred, gt, tol):
    """Exhaustive search over injective assignments (tiny inputs only)."""
    p = [tuple(v) for v in np.argwhere(pred)]
    g = [tuple(v) for v in np.argwhere(gt)]
    best = 0

    def go(i, used, count):
        nonlocal best
        if count + len(p) - i <= best:
            return
        if i == len(p):
            best = max(best, count)
            return
        for j, q in enumerate(g):
            if j not in used and (p[i][0] - q[0]) ** 2 + (p[i][1] - q[1]) ** 2 <= tol * tol:
                go(i + 1, used | {j}, count + 1)
        go(i + 1, used, count)

    go(0, frozenset(), 0)
    return best


# -- PRPoint ------------------------------------------------------------------


def test_prpoint_f():
    pt = E.PRPoint.from_counts(0.5, 3, 1, 3)
    assert pt.precision == 0.75 and pt.recall == 0.5
    assert pt.f == pytest.approx(2 * 0.75 * 0.5 / 1.25)
    assert E.PRPoint.from_counts(0.5, 0, 0, 4).f == 0.0


def test_threshold_grid_and_tolerance():
    t = E.default_thresholds()
    assert len(t) == 33 and t[0] > 0 and t[-1] < 1 and np.all(np.diff(t) > 0)
    assert E.match_tolerance(64, 64) == 1
    assert E.match_tolerance(481, 321) == 4


# -- nms --------------------------------------------------------------------------


def test_nms_row_profile():
    prob = np.tile([0, 0.2, 0.9, 0.3, 0], (7, 1)).astype(float)
    out = E.nms(prob)
    interior = out[1:-1, 1:-1]
    assert np.array_equal(interior[:, 1] > 0, np.ones(5, bool))
    assert not interior[:, 0].any() and not interior[:, 2].any()
    assert np.all(out[:, 2] == 0.9)


def test_nms_constant_map():
    prob = np.full((6, 6), 0.4)
    assert np.array_equal(E.nms(prob), prob)


@given(arrays(np.float64, st.tuples(st.integers(2, 10), st.integers(2, 10)), elements=st.floats(0, 1)))
def test_nms_only_suppresses(prob):
    out = E.nms(prob)
    assert np.all((out == prob) | (out == 0))


def test_nms_keeps_ridge_maximum(rng):
    # a blurred vertical ridge: the crest column is a strict maximum along x
    x = np.arange(16)
    prob = np.tile(np.exp(-((x - 7.3) ** 2) / 4.0), (16, 1))
    out = E.nms(prob)
    assert np.all(out[:, 7] > 0)
    assert not out[:, 5].any() and not out[:, 9].any()


# -- thicken ------------------------------------------------------------------


def test_thicken_single_pixel():
    y = np.zeros((11, 11), np.uint8)
    y[5, 5] = 1
    assert E.thicken(y, 3).sum() == 29
    assert len(E.disk_offsets(3)) == 29


def test_thicken_empty_and_extensive(rng):
    assert not E.thicken(np.zeros((8, 8))).any()
    y = rng.integers(0, 2, (9, 9))
    t = E.thicken(y)
    assert np.all(t >= y)
    # dilation is not idempotent on sparse input
    single = np.zeros((15, 15), np.uint8)
    single[7, 7] = 1
    assert E.thicken(E.thicken(single)).sum() > E.thicken(single).sum()


# -- matcher ------------------------------------------------------------------


def _map(shape, pixels):
    m = np.zeros(shape, bool)
    for p in pixels:
        m[p] = True
    return m


def test_matcher_examples():
    s = (6, 6)
    assert E.match_boundaries(_map(s, [(2, 2)]), _map(s, [(2, 3)]), 1) == (1, 0, 0)
    assert E.match_boundaries(_map(s, [(0, 0)]), _map(s, [(4, 4)]), 1) == (0, 1, 1)
    assert E.match_boundaries(_map(s, [(1, 1), (1, 2)]), _map(s, [(1, 1)]), 1) == (1, 1, 0)


def test_matcher_beats_pure_greedy():
    # nearest-first alone pairs (0,1)-(0,1) and strands both ends; the optimum is 2
    pred = _map((1, 3), [(0, 1), (0, 2)])
    gt = _map((1, 3), [(0, 0), (0, 1)])
    assert E.match_boundaries(pred, gt, 1) == (2, 0, 0)


def test_matcher_errors():
    with pytest.raises(RejectedInput):
        E.match_boundaries(np.zeros((2, 2)), np.zeros((3, 3)), 1)
    with pytest.raises(RejectedInput):
        E.match_boundaries(np.zeros((2, 2)), np.zeros((2, 2)), -1)


@pytest.mark.parametrize("shape", [(1, 1), (1, 2), (2, 2), (1, 4), (2, 3)])
@pytest.mark.parametrize("tol", [0, 1, 2])
def test_matcher_exhaustive_small(shape, tol):
    n = shape[0] * shape[1]
    maps = [np.array(bits, bool).reshape(shape) for bits in itertools.product((0, 1), repeat=n)]
    for pred in maps:
        for gt in maps:
            assert E.match_boundaries(pred, gt, tol)[0] == brute_tp(pred, gt, tol)


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_matcher_matches_optimum_5x5(data):
    h = data.draw(st.integers(1, 5))
    w = data.draw(st.integers(1, 5))
    density = data.draw(st.floats(0.1, 0.9))
    seed = data.draw(st.integers(0, 2**32 - 1))
    tol = data.draw(st.sampled_from([0, 1, 2]))
    r = np.random.default_rng(seed)
    pred, gt = r.random((h, w)) < density, r.random((h, w)) < density
    tp, fp, fn = E.match_boundaries(pred, gt, tol)
    assert tp == optimal_tp(pred, gt, tol)
    assert tp + fp == pred.sum() and tp + fn == gt.sum()


def test_adding_true_positive_keeps_recall(rng):
    gt = rng.random((12, 12)) < 0.2
    pred = rng.random((12, 12)) < 0.2
    before = E.match_boundaries(pred, gt, 1)[0]
    extra = np.argwhere(gt & ~pred)[0]
    pred[tuple(extra)] = True
    assert E.match_boundaries(pred, gt, 1)[0] >= before


# -- curves and ODS ---------------------------------------------------------


def test_pr_curve_perfect_and_empty(rng):
    gt = (rng.random((16, 16)) < 0.1).astype(float)
    for pt in E.pr_curve(gt, gt):
        assert pt.precision == pt.recall == pt.f == 1.0
    for pt in E.pr_curve(np.zeros((16, 16)), gt):
        assert pt.recall == 0 and pt.f == 0


def test_pr_curve_recount(rng):
    prob = rng.random((8, 8))
    gt = rng.random((8, 8)) < 0.2
    thr = [0.2, 0.5, 0.8]
    for t, pt in zip(thr, E.pr_curve(prob, gt, thr, tol=1)):
        tp = optimal_tp(prob >= t, gt, 1)
        assert (pt.tp, pt.fp, pt.fn) == (tp, int((prob >= t).sum()) - tp, int(gt.sum()) - tp)


def test_bad_thresholds():
    for thr in ([0.5, 0.5], [0.0, 0.5], [0.3, 1.0], [0.6, 0.2], []):
        with pytest.raises(RejectedInput):
            E.pr_curve(np.zeros((4, 4)), np.zeros((4, 4)), thr)


def test_ods_perfect_and_empty(rng):
    gts = [(rng.random((16, 16)) < 0.1).astype(np.uint8) for _ in range(3)]
    assert E.ods_f(gts, gts)[1] == 1.0
    assert E.ods_f([np.zeros((16, 16))] * 3, gts)[1] == 0.0
    with pytest.raises(RejectedInput):
        E.ods_f([], [])


def test_ods_two_image_recount(rng):
    probs = [rng.random((8, 8)) for _ in range(2)]
    gts = [rng.random((8, 8)) < 0.25 for _ in range(2)]
    thr = E.default_thresholds(9)
    best_t, best_f = E.ods_f(probs, gts, thr, tol=1)
    fs = []
    for t in thr:
        tp = sum(optimal_tp(p >= t, g, 1) for p, g in zip(probs, gts))
        n_pred = sum(int((p >= t).sum()) for p in probs)
        n_gt = sum(int(g.sum()) for g in gts)
        fs.append(E.f_measure(tp / n_pred if n_pred else 0.0, tp / n_gt))
    assert best_f == pytest.approx(max(fs))
    assert best_t == thr[int(np.argmax(fs))]


def test_ods_permutation_invariant(rng):
    probs = [rng.random((8, 8)) for _ in range(4)]
    gts = [rng.random((8, 8)) < 0.25 for _ in range(4)]
    a = E.evaluate(probs, gts, tol=1)
    b = E.evaluate(probs[::-1], gts[::-1], tol=1)
    assert a.ods() == b.ods()
    assert a.ois().f >= a.ods().f - 1e-12
