"""Similarity kernels and the two globalization passes.

Point-to-prototype globalization rebuilds each prototype as a
similarity-weighted average over all points of its class. Prototype-to-point
globalization adds a prototype mixture to every point feature and then
re-aggregates the prototypes from the updated features.

Similarities have the form exp(-dist). Normalized weights are computed as a
softmax of -dist along the normalization axis, which equals f / sum(f) but
cannot underflow to 0/0.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ContractError, NumericError
from .prototype import PrototypeSet

MEASURES = ("l2norm", "inner_product")
IP_SIGNS = ("literal", "aligned")


@dataclass
class SimilarityConfig:
    measure1: str = "l2norm"
    measure2: str = "inner_product"
    lam: float = 0.85
    xi: float = 0.5
    ip_sign: str = "aligned"
    eps: float = 1e-6

    def validate(self):
        for m in (self.measure1, self.measure2):
            if m not in MEASURES:
                raise ConfigError(f"bfg: unknown measure {m!r}; expected one of {MEASURES}")
        if self.ip_sign not in IP_SIGNS:
            raise ConfigError(f"bfg: ip_sign must be one of {IP_SIGNS}, got {self.ip_sign!r}")
        if self.lam <= 0 or self.xi <= 0:
            raise ConfigError("bfg: lambda and xi must be > 0")
        if self.eps <= 0:
            raise ConfigError("bfg: eps must be > 0")


def distance(features, protos, coords, proto_coords, measure, cfg):
    """m x K distance matrix between points and prototypes.

    l2norm:        sqrt(lam / max(max_i F_n,i, eps) * |F_n - mu_k|^2 + |J_n - muJ_k|^2)
    inner_product: s * xi * (mu_k . F_n + muJ_k . J_n), s = +1 (literal) or -1 (aligned)
    """
    features, protos = ag.as_tensor(features), ag.as_tensor(protos)
    coords = np.asarray(coords, dtype=np.float64)
    proto_coords = np.asarray(proto_coords, dtype=np.float64)
    m, d = features.shape
    k = protos.shape[0]
    if protos.shape[1] != d or coords.shape != (m, 3) or proto_coords.shape != (k, 3):
        raise ContractError(
            f"distance: features {features.shape}, protos {protos.shape}, "
            f"coords {coords.shape}, proto_coords {proto_coords.shape}")
    if measure == "l2norm":
        diff = ag.reshape(features, (m, 1, d)) - ag.reshape(protos, (1, k, d))
        d_feat = ag.sum_over_axis(diff * diff, axis=2)
        peak = ag.clamp_min(ag.max_over_axis(features, axis=1), cfg.eps)
        scale = ag.reshape(cfg.lam / peak, (m, 1))
        cdiff = coords[:, None, :] - proto_coords[None, :, :]
        d_coord = np.zeros((m, k))
        for l in range(3):
            d_coord += cdiff[:, :, l] * cdiff[:, :, l]
        return ag.sqrt(scale * d_feat + d_coord)
    if measure == "inner_product":
        sign = 1.0 if cfg.ip_sign == "literal" else -1.0
        dot = ag.matmul(features, ag.transpose(protos)) + coords @ proto_coords.T
        return (sign * cfg.xi) * dot
    raise ConfigError(f"bfg: unknown measure {measure!r}")


def similarity(features, protos, coords, proto_coords, measure, cfg):
    """exp(-distance); strictly positive, raises NumericError on under/overflow."""
    dist = distance(features, protos, coords, proto_coords, measure, cfg)
    out = ag.exp(-dist)
    if np.any(out.data <= 0):
        raise NumericError("similarity underflowed to zero")
    return out


def normalized_weights(features, protos, coords, proto_coords, measure, cfg, axis):
    """f / sum(f) along ``axis`` (0: over points, 1: over prototypes)."""
    dist = distance(features, protos, coords, proto_coords, measure, cfg)
    return ag.softmax(-dist, axis=axis)


def po2prg(masked, protos, cfg):
    """Prototype k becomes the w[:, k]-weighted mean of all masked point features."""
    if protos.class_id != masked.class_id:
        raise ContractError("po2prg: prototypes and points belong to different classes")
    w = normalized_weights(masked.features, protos.features, masked.coords, protos.coords,
                           cfg.measure1, cfg, axis=0)
    upsilon = ag.matmul(ag.transpose(w), masked.features)
    return PrototypeSet(protos.class_id, upsilon, protos.coords, "po2prg", {"w": w.data})


def pr2pog(masked, protos, cfg):
    """Returns (updated point features, enhanced prototypes).

    Each point adds the prototype mixture weighted over prototypes; the
    prototypes are then re-aggregated from the updated points with weights
    normalized over points. Prototype coordinates are carried over unchanged.
    """
    if protos.class_id != masked.class_id:
        raise ContractError("pr2pog: prototypes and points belong to different classes")
    w_tilde = normalized_weights(masked.features, protos.features, masked.coords, protos.coords,
                                 cfg.measure2, cfg, axis=1)
    updated = masked.features + ag.matmul(w_tilde, protos.features)
    w_hat = normalized_weights(updated, protos.features, masked.coords, protos.coords,
                               cfg.measure2, cfg, axis=0)
    r = ag.matmul(ag.transpose(w_hat), updated)
    out = PrototypeSet(protos.class_id, r, protos.coords, "pr2pog",
                       {"w_tilde": w_tilde.data, "w_hat": w_hat.data})
    return updated, out
