"""Pure numpy implementations of the hot kernels.

Every distance here is accumulated one coordinate at a time, in column
order, so the results match the compiled kernels bit for bit.
"""
import numpy as np


def sq_dists_to(points, q):
    acc = np.zeros(points.shape[0])
    for c in range(points.shape[1]):
        diff = points[:, c] - q[c]
        acc += diff * diff
    return acc


def pairwise_sq_dists(a, b):
    acc = np.zeros((a.shape[0], b.shape[0]))
    for c in range(a.shape[1]):
        diff = a[:, c][:, None] - b[:, c][None, :]
        acc += diff * diff
    return acc


def knn(coords, k):
    d = pairwise_sq_dists(coords, coords)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k], dtype=np.int64)


def fps(points, n_samples, first):
    m = points.shape[0]
    out = np.empty(n_samples, dtype=np.int64)
    out[0] = first
    mind = sq_dists_to(points, points[first])
    mind[first] = -1.0
    for s in range(1, n_samples):
        nxt = int(np.argmax(mind))
        out[s] = nxt
        mind = np.minimum(mind, sq_dists_to(points, points[nxt]))
        mind[out[: s + 1]] = -1.0
    return out


def nearest_seed(points, seeds):
    d = pairwise_sq_dists(points, seeds)
    return np.argmin(d, axis=1).astype(np.int64)


def scatter_add_rows(out, idx, src):
    np.add.at(out, idx, src)
