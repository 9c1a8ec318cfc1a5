"""Sparse prototype generation (masking, FPS seeds, nearest-seed parts,
per-part averaging) and sparse prototype assembly.
"""
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import kernels
from .errors import ContractError

STAGES = ("initial", "po2prg", "pr2pog", "assembled_input")


@dataclass
class MaskedPoints:
    class_id: int
    features: ag.Tensor
    coords: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.features.shape[0] < 1:
            raise ContractError(f"class {self.class_id}: no masked points")
        if self.features.shape[0] != self.coords.shape[0]:
            raise ContractError("MaskedPoints: features and coords are not aligned")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class PartAssignment:
    seeds: np.ndarray
    assignment: np.ndarray

    @property
    def n_parts(self):
        return len(self.seeds)


@dataclass
class PrototypeSet:
    class_id: int
    features: ag.Tensor
    coords: np.ndarray
    stage: str = "initial"
    weights: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.features.shape[0]


def apply_mask(features, cloud, mask):
    """Keep the rows selected by ``mask`` (in order) and remember where they came from."""
    m = mask.mask
    if m.shape[0] != len(cloud) or m.shape[0] != features.shape[0]:
        raise ContractError(f"apply_mask: mask of {m.shape[0]} for {features.shape[0]} points")
    idx = np.flatnonzero(m)
    if idx.size == 0:
        raise ContractError(f"apply_mask: empty mask for class {mask.class_id}")
    return MaskedPoints(mask.class_id, ag.gather_rows(features, idx), cloud.coords[idx], idx)


def pool_masked(parts):
    """Concatenate the masked points of several support shots of one class."""
    if len(parts) == 1:
        return parts[0]
    feats = ag.concat([p.features for p in parts], axis=0)
    return MaskedPoints(parts[0].class_id, feats,
                        np.concatenate([p.coords for p in parts]),
                        np.concatenate([p.indices for p in parts]))


def fps(points, k, seed_rule="centroid", backend=None):
    """Greedy farthest point sampling.

    The first seed is the point farthest from the centroid (``seed_rule=
    "centroid"``) or index 0 (``"first"``); each next seed maximizes the
    minimum squared distance to the chosen ones. Ties go to the smaller index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    m = points.shape[0]
    if not 1 <= k <= m:
        raise ContractError(f"fps: need 1 <= K <= m, got K={k}, m={m}")
    if seed_rule == "centroid":
        first = int(np.argmax(kernels.sq_dists_to(points, points.mean(axis=0))))
    elif seed_rule == "first":
        first = 0
    else:
        raise ContractError(f"fps: unknown seed_rule {seed_rule!r}")
    return kernels.farthest_point_sampling(points, k, first, backend=backend)


def assign_to_seeds(points, seeds, backend=None):
    """Nearest-seed assignment (ties to the smaller seed index); each seed keeps itself."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    seeds = np.asarray(seeds, dtype=np.int64)
    assignment = kernels.nearest_seed(points, points[seeds], backend=backend)
    assignment[seeds] = np.arange(len(seeds))
    return PartAssignment(seeds, assignment)


def extract_prototypes(mp, pa):
    """Per-part means of features (differentiable) and of coordinates."""
    k = pa.n_parts
    counts = np.bincount(pa.assignment, minlength=k)
    if np.any(counts == 0):
        raise ContractError(f"extract_prototypes: empty part in class {mp.class_id}")
    feats = ag.scatter_mean(mp.features, pa.assignment, k)
    coords = np.stack([mp.coords[pa.assignment == j].sum(axis=0) for j in range(k)])
    coords = coords / counts[:, None]
    return PrototypeSet(mp.class_id, feats, coords, "initial")


def spgen(mp, k, space="feature", backend=None):
    """Initial sparse prototypes of one class; K is clipped to the point count.

    Seeds and parts are chosen on detached values, so no gradient flows
    through the discrete selection.
    """
    k = min(int(k), len(mp))
    space_pts = mp.features.data if space == "feature" else mp.coords
    if space not in ("feature", "coord"):
        raise ContractError(f"spgen: unknown seed space {space!r}")
    seeds = fps(space_pts, k, backend=backend)
    pa = assign_to_seeds(space_pts, seeds, backend=backend)
    return extract_prototypes(mp, pa)


def masked_average(mp):
    """Single prototype by masked average pooling (the ProtoNet prototype)."""
    pa = PartAssignment(np.zeros(1, dtype=np.int64), np.zeros(len(mp), dtype=np.int64))
    return extract_prototypes(mp, pa)


# assembly

def init_spa(dim, seed, noise=0.01):
    """Assembly MLP parameters, initialized near the identity map.

    Features entering the MLP are nonnegative, so relu(x @ I) @ I == x and an
    untrained MLP leaves prototypes in the query feature space. ``noise`` is
    the half-width of the seeded uniform perturbation added to both weights.
    """
    rng = np.random.default_rng(seed)
    eye = np.eye(dim)
    return {
        "spa.fc1.W": ag.parameter(eye + rng.uniform(-noise, noise, (dim, dim)), "spa.fc1.W"),
        "spa.fc1.b": ag.parameter(np.zeros(dim), "spa.fc1.b"),
        "spa.fc2.W": ag.parameter(eye + rng.uniform(-noise, noise, (dim, dim)), "spa.fc2.W"),
        "spa.fc2.b": ag.parameter(np.zeros(dim), "spa.fc2.b"),
    }


def spa_mlp(features, params):
    h = ag.relu(ag.matmul(features, params["spa.fc1.W"]) + params["spa.fc1.b"])
    return ag.matmul(h, params["spa.fc2.W"]) + params["spa.fc2.b"]


def spa_fuse(rhat):
    """Per-channel softmax over the K prototypes, then the weighted sum.

    Returns the fused D-vector and the K x D weights.
    """
    rhat = ag.as_tensor(rhat)
    alpha = ag.softmax(rhat, axis=0)
    return ag.sum_over_axis(alpha * rhat, axis=0), alpha


def assemble(protos, params):
    if protos.k < 1:
        raise ContractError("assemble: no prototypes")
    z, _ = spa_fuse(spa_mlp(protos.features, params))
    return z
