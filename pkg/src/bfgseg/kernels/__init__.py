"""Hot inner loops: kNN graph, farthest point sampling, nearest-seed
assignment and row scatter-add.

The compiled extension is used when it was built; otherwise the numpy
fallback is selected. Set ``BFGSEG_PURE_PYTHON=1`` to force the fallback.
Both backends return bit-identical results.
"""
import os

import numpy as np

from ..errors import ContractError
from . import _pykernels

_compiled = None
if os.environ.get("BFGSEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _pykernels


def get_backend(name=None):
    """Return the kernel implementation module by name ("cython" or "python")."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def knn_indices(coords, k, backend=None):
    coords = _f64(coords)
    n = coords.shape[0]
    if coords.ndim != 2:
        raise ContractError(f"knn: coords must be 2-D, got shape {coords.shape}")
    if not 1 <= k < n:
        raise ContractError(f"knn: need 1 <= k < N, got k={k}, N={n}")
    return get_backend(backend).knn(coords, int(k))


def farthest_point_sampling(points, n_samples, first, backend=None):
    points = _f64(points)
    m = points.shape[0]
    if not 1 <= n_samples <= m:
        raise ContractError(f"fps: need 1 <= K <= m, got K={n_samples}, m={m}")
    if not 0 <= first < m:
        raise ContractError(f"fps: first index {first} out of range for m={m}")
    return get_backend(backend).fps(points, int(n_samples), int(first))


def nearest_seed(points, seeds, backend=None):
    points, seeds = _f64(points), _f64(seeds)
    if points.shape[1] != seeds.shape[1]:
        raise ContractError(
            f"nearest_seed: dimension mismatch {points.shape} vs {seeds.shape}")
    return get_backend(backend).nearest_seed(points, seeds)


def scatter_add_rows(out, idx, src, backend=None):
    """In-place ``out[idx[r]] += src[r]`` for every row r, in row order."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    src = _f64(src)
    if not out.flags.c_contiguous or out.dtype != np.float64:
        raise ContractError("scatter_add_rows: out must be C-contiguous float64")
    get_backend(backend).scatter_add_rows(out, idx, src)
    return out


def sq_dists_to(points, q):
    return _pykernels.sq_dists_to(_f64(points), _f64(q))
