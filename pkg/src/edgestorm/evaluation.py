"""
Boundary evaluation: non-maximum suppression, ground-truth thickening,
tolerance-based pixel correspondence and dataset-level F-measures.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from edgestorm.errors import RejectedInput

N_THRESHOLDS = 33
MATCH_DIAG_FRACTION = 0.0075


def default_thresholds(n=N_THRESHOLDS):
    return np.arange(1, n + 1) / (n + 1)


def match_tolerance(height, width):
    return int(round(MATCH_DIAG_FRACTION * np.hypot(height, width)))


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, threshold, tp, fp, fn):
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return cls(float(threshold), p, r, f_measure(p, r), int(tp), int(fp), int(fn))


def f_measure(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


# -- thinning and thickening ------------------------------------------------


def nms(prob, sigma=1.0):
    """Keep a pixel iff it is >= both interpolated neighbours one pixel away
    along the local gradient (Sobel of a Gaussian-smoothed copy). Pixels with
    zero gradient are kept."""
    prob = np.asarray(prob, dtype=np.float64)
    smooth = ndimage.gaussian_filter(prob, sigma, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    flat = mag == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        uy = np.where(flat, 0.0, gy / mag)
        ux = np.where(flat, 0.0, gx / mag)
    yy, xx = np.mgrid[0 : prob.shape[0], 0 : prob.shape[1]].astype(np.float64)
    ahead = ndimage.map_coordinates(prob, [yy + uy, xx + ux], order=1, mode="nearest")
    behind = ndimage.map_coordinates(prob, [yy - uy, xx - ux], order=1, mode="nearest")
    keep = flat | ((prob >= ahead) & (prob >= behind))
    return np.where(keep, prob, 0.0)


def disk_offsets(radius):
    r = int(np.floor(radius))
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= radius * radius]


def thicken(y, radius=3):
    """Dilate a binary map (or a stack of maps) by a Euclidean disk."""
    y = np.asarray(y) > 0
    out = np.zeros_like(y)
    h, w = y.shape[-2:]
    for dy, dx in disk_offsets(radius):
        src = y[..., max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        out[..., max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] |= src
    return out.astype(np.uint8)


# -- correspondence ----------------------------------------------------------


def match_boundaries(pred, gt, tol):
    """One-to-one correspondence of predicted and true boundary pixels.

    Pairs within Euclidean distance ``tol`` are first consumed greedily
    (nearest first, row-major tie-break); augmenting paths then grow the
    matching to maximum cardinality. Returns ``(tp, fp, fn)``.
    """
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise RejectedInput(f"prediction {pred.shape} and ground truth {gt.shape} differ in extent")
    if tol < 0:
        raise RejectedInput("tolerance must be non-negative")
    n_pred, n_gt = int(pred.sum()), int(gt.sum())
    if n_pred == 0 or n_gt == 0:
        return 0, n_pred, n_gt
    adj = _candidates(pred, gt, tol)
    match_p = -np.ones(n_pred, dtype=int)
    match_g = -np.ones(n_gt, dtype=int)
    # greedy pass over candidates sorted by (distance, pred index, gt index)
    order = np.lexsort((adj[:, 2], adj[:, 1], adj[:, 0]))
    for d2, p, g in adj[order]:
        if match_p[p] < 0 and match_g[g] < 0:
            match_p[p], match_g[g] = g, p
    neighbours = [[] for _ in range(n_pred)]
    for d2, p, g in adj[order]:
        neighbours[p].append(g)
    for p in range(n_pred):
        if match_p[p] < 0 and neighbours[p]:
            _augment(p, neighbours, match_p, match_g)
    tp = int(np.sum(match_p >= 0))
    return tp, n_pred - tp, n_gt - tp


def _candidates(pred, gt, tol):
    h, w = pred.shape
    gt_index = -np.ones(pred.shape, dtype=int)
    gt_index[gt] = np.arange(int(gt.sum()))
    py, px = np.nonzero(pred)
    rows = []
    for dy, dx in disk_offsets(tol):
        qy, qx = py + dy, px + dx
        ok = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        gi = np.full(len(py), -1)
        gi[ok] = gt_index[qy[ok], qx[ok]]
        hit = np.nonzero(gi >= 0)[0]
        rows.append(np.stack([np.full(len(hit), dy * dy + dx * dx), hit, gi[hit]], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, 3), dtype=int)


def _augment(root, neighbours, match_p, match_g):
    """Search for an augmenting path from unmatched pred ``root`` (iterative DFS)."""
    visited = set()
    stack = [(root, iter(neighbours[root]))]
    path = []
    while stack:
        p, it = stack[-1]
        advanced = False
        for g in it:
            if g in visited:
                continue
            visited.add(g)
            owner = match_g[g]
            if owner < 0:
                path.append((p, g))
                for pp, gg in path:
                    match_p[pp], match_g[gg] = gg, pp
                return True
            path.append((p, g))
            stack.append((owner, iter(neighbours[owner])))
            advanced = True
            break
        if not advanced:
            stack.pop()
            if path:
                path.pop()
    return False


# -- curves and F-measures -----------------------------------------------------


def counts_over_thresholds(prob, gt, thresholds, tol):
    """(len(thresholds), 3) array of tp, fp, fn."""
    return np.array([match_boundaries(prob >= t, gt, tol) for t in thresholds], dtype=np.int64)


def pr_curve(prob, gt, thresholds=None, tol=None):
    thresholds = _check_thresholds(thresholds)
    if tol is None:
        tol = match_tolerance(*np.shape(gt))
    counts = counts_over_thresholds(np.asarray(prob), gt, thresholds, tol)
    return [PRPoint.from_counts(t, *c) for t, c in zip(thresholds, counts)]


def _check_thresholds(thresholds):
    t = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or len(t) == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
        raise RejectedInput("thresholds must be strictly increasing values in (0, 1)")
    return t


@dataclass
class BoundaryReport:
    thresholds: np.ndarray
    per_image: np.ndarray  # (N, T, 3) tp/fp/fn

    @property
    def totals(self):
        return self.per_image.sum(axis=0)

    def curve(self):
        return [PRPoint.from_counts(t, *c) for t, c in zip(self.thresholds, self.totals)]

    def ods(self):
        curve = self.curve()
        best = max(range(len(curve)), key=lambda i: (curve[i].f, -i))
        return curve[best]

    def ois(self):
        """Per-image best threshold, counts summed across images."""
        tp = fp = fn = 0
        for counts in self.per_image:
            fs = [PRPoint.from_counts(0.5, *c).f for c in counts]
            c = counts[int(np.argmax(fs))]
            tp, fp, fn = tp + c[0], fp + c[1], fn + c[2]
        return PRPoint.from_counts(float("nan"), tp, fp, fn)

    def image_point(self, i, threshold_index):
        return PRPoint.from_counts(self.thresholds[threshold_index], *self.per_image[i, threshold_index])


def evaluate(probs, gts, thresholds=None, tol=None, apply_nms=True):
    """Count boundary correspondences for every image and threshold."""
    probs = [np.asarray(p, dtype=np.float64) for p in probs]
    gts = [np.asarray(g) for g in gts]
    if not probs:
        raise RejectedInput("cannot evaluate an empty dataset")
    if len(probs) != len(gts):
        raise RejectedInput("predictions and ground truths are not aligned")
    thresholds = _check_thresholds(thresholds)
    per_image = []
    for p, g in zip(probs, gts):
        t = match_tolerance(*g.shape) if tol is None else tol
        per_image.append(counts_over_thresholds(nms(p) if apply_nms else p, g, thresholds, t))
    return BoundaryReport(thresholds, np.stack(per_image))


def ods_f(probs, gts, thresholds=None, tol=None, apply_nms=False):
    """Dataset-wide best single threshold and its F-measure.

    ``probs`` are expected to be suppressed already unless ``apply_nms``.
    """
    best = evaluate(probs, gts, thresholds, tol, apply_nms).ods()
    return best.threshold, best.f
