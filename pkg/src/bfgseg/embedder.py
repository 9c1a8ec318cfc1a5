"""DGCNN-lite point embedder: two EdgeConv layers over a static kNN graph,
followed by a per-point MLP head. Support and query branches share it.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import kernels
from .errors import ContractError


@dataclass
class EmbedderConfig:
    input_channels: int = 6
    edge_widths: tuple = (32, 64)
    knn_k: int = 16
    head_hidden: int = 64
    feature_dim: int = 64
    seed: int = 0

    def validate(self):
        if self.input_channels not in (3, 6):
            raise ContractError(f"embedder: input_channels must be 3 or 6, got {self.input_channels}")
        widths = list(self.edge_widths) + [self.head_hidden, self.feature_dim, self.knn_k]
        if not self.edge_widths or min(widths) < 1:
            raise ContractError("embedder: all widths and knn_k must be >= 1")


def glorot(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


def init_embedder(cfg):
    """Fresh parameters named ``embedder.*``; weights Glorot-uniform, biases zero."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    c_in = cfg.input_channels
    for i, w in enumerate(cfg.edge_widths):
        params[f"embedder.edge{i}.W"] = ag.parameter(glorot(rng, 2 * c_in, w), f"embedder.edge{i}.W")
        params[f"embedder.edge{i}.b"] = ag.parameter(np.zeros(w), f"embedder.edge{i}.b")
        c_in = w
    widths = [sum(cfg.edge_widths), cfg.head_hidden, cfg.feature_dim]
    for j in range(2):
        params[f"embedder.head{j}.W"] = ag.parameter(glorot(rng, widths[j], widths[j + 1]),
                                                     f"embedder.head{j}.W")
        params[f"embedder.head{j}.b"] = ag.parameter(np.zeros(widths[j + 1]), f"embedder.head{j}.b")
    return params


def knn_graph(coords, k):
    """Row i holds the k nearest other points to i; ties go to the smaller index."""
    return kernels.knn_indices(coords, k)


def edgeconv(features, neighbors, W, b):
    """out_i = max_j relu([f_i, f_j - f_i] @ W + b) over the neighbors j of i.

    With a single linear layer the edge term splits as
    f_i @ (W_top - W_bot) + f_j @ W_bot, and relu commutes with the max over
    j, so only the neighbor half needs gathering.
    """
    features = ag.as_tensor(features)
    n, c = features.shape
    neighbors = np.asarray(neighbors)
    if neighbors.ndim != 2 or neighbors.shape[0] != n:
        raise ContractError(f"edgeconv: neighbors {neighbors.shape} for {n} points")
    if W.shape[0] != 2 * c:
        raise ContractError(f"edgeconv: weight {W.shape} for {c} input channels")
    k = neighbors.shape[1]
    W_top = ag.gather_rows(W, np.arange(c))
    W_bot = ag.gather_rows(W, np.arange(c, 2 * c))
    center = ag.matmul(features, W_top - W_bot)
    nb = ag.matmul(features, W_bot)
    gathered = ag.reshape(ag.gather_rows(nb, neighbors.reshape(-1)), (n, k, W.shape[1]))
    return ag.relu(center + ag.max_over_axis(gathered, axis=1) + b)


def edgeconv_reference(features, neighbors, W, b):
    """Literal per-edge evaluation in numpy (used by tests)."""
    f = np.asarray(features, dtype=np.float64)
    out = np.empty((f.shape[0], W.shape[1]))
    for i, row in enumerate(neighbors):
        edges = np.concatenate([np.repeat(f[i:i + 1], len(row), 0), f[row] - f[i]], axis=1)
        out[i] = np.maximum(edges @ W + b, 0).max(axis=0)
    return out


def input_features(cloud, cfg):
    """Per-block centered coordinates, plus colors when input_channels == 6."""
    centered = cloud.coords - cloud.coords.mean(axis=0)
    if cfg.input_channels == 6:
        return centered, np.concatenate([centered, cloud.colors], axis=1)
    return centered, centered


def embed(cloud, cfg, params):
    """FeatureMatrix (N x feature_dim) for one cloud; row i belongs to point i."""
    n = len(cloud)
    if n < cfg.knn_k + 1:
        raise ContractError(f"embed: cloud has {n} points, need at least knn_k+1={cfg.knn_k + 1}")
    centered, x = input_features(cloud, cfg)
    neighbors = knn_graph(centered, cfg.knn_k)
    h = ag.Tensor(x)
    layers = []
    for i in range(len(cfg.edge_widths)):
        h = edgeconv(h, neighbors, params[f"embedder.edge{i}.W"], params[f"embedder.edge{i}.b"])
        layers.append(h)
    h = ag.concat(layers, axis=1) if len(layers) > 1 else layers[0]
    for j in range(2):
        h = ag.relu(ag.matmul(h, params[f"embedder.head{j}.W"]) + params[f"embedder.head{j}.b"])
    return h
