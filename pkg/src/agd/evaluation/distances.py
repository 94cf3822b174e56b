"""Two-sample statistics on raw point sets.

Both metrics work directly in data space: at this scale there is no feature
extractor worth the name, and the energy distance is a hyperparameter-free
statistic with a clean population limit.  Pairwise distances are accumulated
in row blocks so memory stays flat for large sets.
"""

import numpy as np

from agd.errors import InputError

BLOCK = 1024


def _mean_cross_distance(a, b):
    """Mean euclidean distance over all (i, j) pairs, blockwise over rows."""
    total = 0.0
    for i in range(0, a.shape[0], BLOCK):
        blk = a[i : i + BLOCK]
        d2 = (
            np.sum(blk**2, axis=1)[:, None]
            + np.sum(b**2, axis=1)[None, :]
            - 2.0 * blk @ b.T
        )
        np.maximum(d2, 0.0, out=d2)
        total += float(np.sum(np.sqrt(d2)))
    return total / (a.shape[0] * b.shape[0])


def energy_distance(samples_a, samples_b):
    """V-statistic 2 E|a-b| - E|a-a'| - E|b-b'|; exactly 0 on identical sets."""
    a = np.ascontiguousarray(samples_a, dtype=np.float64)
    b = np.ascontiguousarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InputError("sample sets must be 2-D arrays with matching width")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InputError("sample sets must be non-empty")
    return (
        2.0 * _mean_cross_distance(a, b)
        - _mean_cross_distance(a, a)
        - _mean_cross_distance(b, b)
    )


def _kth_nn_radii(x, k):
    """Distance to the k-th nearest other point, per row."""
    n = x.shape[0]
    radii = np.empty(n)
    for i in range(0, n, BLOCK):
        blk = x[i : i + BLOCK]
        d2 = (
            np.sum(blk**2, axis=1)[:, None]
            + np.sum(x**2, axis=1)[None, :]
            - 2.0 * blk @ x.T
        )
        np.maximum(d2, 0.0, out=d2)
        # push each row's own zero entry out of the ranking
        for r in range(blk.shape[0]):
            d2[r, i + r] = np.inf
        part = np.partition(d2, k - 1, axis=1)[:, k - 1]
        radii[i : i + BLOCK] = np.sqrt(part)
    return radii


def _fraction_covered(points, centers, radii):
    """Fraction of `points` lying inside any center's ball."""
    hit = np.zeros(points.shape[0], dtype=bool)
    r2 = radii**2
    for i in range(0, points.shape[0], BLOCK):
        blk = points[i : i + BLOCK]
        d2 = (
            np.sum(blk**2, axis=1)[:, None]
            + np.sum(centers**2, axis=1)[None, :]
            - 2.0 * blk @ centers.T
        )
        hit[i : i + BLOCK] = np.any(d2 <= r2[None, :], axis=1)
    return float(np.mean(hit))


def knn_precision_recall(gen, real, k=5):
    """Manifold precision/recall from k-NN balls on raw points.

    Precision: fraction of generated points inside the union of balls around
    real points (radius = each real point's k-th NN distance within real).
    Recall: the mirror image.
    """
    g = np.ascontiguousarray(gen, dtype=np.float64)
    r = np.ascontiguousarray(real, dtype=np.float64)
    if k < 1:
        raise InputError("k must be positive")
    if g.shape[0] <= k or r.shape[0] <= k:
        raise InputError("both sets must exceed k points")
    precision = _fraction_covered(g, r, _kth_nn_radii(r, k))
    recall = _fraction_covered(r, g, _kth_nn_radii(g, k))
    return precision, recall
