"""Independent naive oracles used to check the library implementations.

Everything here is written the dumb, obviously-correct way (explicit loops
and textbook formulas) and must stay independent of the code under test.
"""

import math

import numpy as np

DELTA = 1e-5


def flat(mask):
    return [float(v) for v in np.asarray(mask, dtype=float).ravel()]


def naive_confusion(gt, pr):
    g, p = flat(gt), flat(pr)
    tp = sum(gi * pi for gi, pi in zip(g, p))
    fp = sum(p) - tp
    fn = sum(g) - tp
    return tp, max(0.0, fp), max(0.0, fn)


def naive_dice(gt, pr, delta=DELTA):
    tp, fp, fn = naive_confusion(gt, pr)
    return (2.0 * tp + delta) / (fn + fp + 2.0 * tp + delta)


def naive_f_score(gt, pr, beta=1.0, delta=DELTA):
    tp, fp, fn = naive_confusion(gt, pr)
    num = (1.0 + beta ** 2) * (tp + delta)
    return num / (num + beta ** 2 * fn + fp + delta)


def naive_iou(gt, pr, delta=DELTA):
    tp, fp, fn = naive_confusion(gt, pr)
    return (tp + delta) / (fn + fp + tp + delta)


def naive_rmse(gt, pr):
    g, p = flat(gt), flat(pr)
    return math.sqrt(sum((gi - pi) ** 2 for gi, pi in zip(g, p)) / len(g))


def naive_bce(gt, pr, clamp=1e-7):
    g, p = flat(gt), flat(pr)
    total = 0.0
    for gi, pi in zip(g, p):
        pi = min(max(pi, clamp), 1.0 - clamp)
        total += -(gi * math.log(pi) + (1.0 - gi) * math.log(1.0 - pi))
    return total / len(g)


def _points(mask, spacing):
    arr = np.asarray(mask, dtype=float)
    return [
        (i * spacing[0], j * spacing[1])
        for i in range(arr.shape[0])
        for j in range(arr.shape[1])
        if arr[i, j] > 0.5
    ]


def _directed(a_pts, b_pts):
    # max over a of (min over b of euclidean distance), via a plain distance table
    ay = np.array([p[0] for p in a_pts])[:, None]
    ax = np.array([p[1] for p in a_pts])[:, None]
    by = np.array([p[0] for p in b_pts])[None, :]
    bx = np.array([p[1] for p in b_pts])[None, :]
    table = np.sqrt((ay - by) ** 2 + (ax - bx) ** 2)
    return float(table.min(axis=1).max())


def naive_hausdorff(gt, pr, spacing=(1.0, 1.0)):
    a = _points(gt, spacing)
    b = _points(pr, spacing)
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.nan
    return max(_directed(a, b), _directed(b, a))


def naive_directed_hausdorff(gt, pr, spacing=(1.0, 1.0)):
    a = _points(gt, spacing)
    b = _points(pr, spacing)
    if not a or not b:
        return math.nan
    return _directed(a, b)


def naive_box_stats(values):
    """Five-number summary with linear interpolation between closest ranks."""
    ordered = sorted(float(v) for v in values)
    n = len(ordered)

    def quantile(q):
        pos = (n - 1) * q
        lo = math.floor(pos)
        hi = math.ceil(pos)
        if lo == hi:
            return ordered[lo]
        frac = pos - lo
        return ordered[lo] * (1.0 - frac) + ordered[hi] * frac

    if n > 1:
        mean = sum(ordered) / n
        stddev = math.sqrt(sum((v - mean) ** 2 for v in ordered) / (n - 1))
    else:
        stddev = 0.0
    return {
        "min": ordered[0],
        "q1": quantile(0.25),
        "median": quantile(0.5),
        "q3": quantile(0.75),
        "max": ordered[-1],
        "stddev": stddev,
        "n": n,
    }


def random_mask_array(rng, height, width, density):
    return (rng.random((height, width)) < density).astype(np.uint8)


def random_mask_pair(rng, max_side=64):
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    densities = [0.0, 0.02, 0.1, 0.3, 0.6]
    gt = random_mask_array(rng, h, w, densities[rng.integers(len(densities))])
    pr = random_mask_array(rng, h, w, densities[rng.integers(len(densities))])
    return gt, pr


def exhaustive_masks(height, width):
    """Every binary mask of the given shape."""
    n = height * width
    for bits in range(2 ** n):
        yield np.array(
            [(bits >> k) & 1 for k in range(n)], dtype=np.uint8
        ).reshape(height, width)
