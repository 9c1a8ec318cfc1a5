import numpy as np
import pytest

from bfgseg import autograd as ag
from bfgseg.embedder import (EmbedderConfig, edgeconv, edgeconv_reference, embed, init_embedder,
                             knn_graph)
from bfgseg.errors import ContractError
from bfgseg.pointcloud import LabeledCloud

CFG = EmbedderConfig(knn_k=6, edge_widths=(8, 12), head_hidden=10, feature_dim=7, seed=3)


def cloud(n=40, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 3, n) if labels is None else labels
    return LabeledCloud(rng.normal(size=(n, 3)), lab, rng.random((n, 3)))


def test_knn_graph_example():
    assert knn_graph(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]), 1).ravel().tolist() == [1, 0, 1]


def test_edgeconv_matches_reference():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(20, 5))
    nb = knn_graph(rng.normal(size=(20, 3)), 4)
    W, b = rng.normal(size=(10, 6)), rng.normal(size=6)
    got = edgeconv(f, nb, ag.Tensor(W), ag.Tensor(b)).data
    assert np.max(np.abs(got - edgeconv_reference(f, nb, W, b))) < 1e-12


def test_edgeconv_constant_field_ignores_neighbors():
    rng = np.random.default_rng(2)
    f = np.tile(rng.normal(size=4), (10, 1))
    W, b = ag.Tensor(rng.normal(size=(8, 5))), ag.Tensor(rng.normal(size=5))
    a = edgeconv(f, knn_graph(rng.normal(size=(10, 3)), 3), W, b).data
    c = edgeconv(f, rng.integers(0, 10, (10, 3)), W, b).data
    assert np.array_equal(a, c)
    assert np.allclose(a, np.maximum(f[:1] @ W.data[:4] + b.data, 0))


def test_edgeconv_k1_single_edge():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(6, 3))
    nb = knn_graph(rng.normal(size=(6, 3)), 1)
    W, b = rng.normal(size=(6, 4)), rng.normal(size=4)
    edge = np.concatenate([f, f[nb[:, 0]] - f], axis=1)
    got = edgeconv(f, nb, ag.Tensor(W), ag.Tensor(b)).data
    assert np.allclose(got, np.maximum(edge @ W + b, 0), atol=1e-12)


def test_edgeconv_gradient_fd():
    rng = np.random.default_rng(4)
    nb = knn_graph(rng.normal(size=(8, 3)), 3)
    base = {"f": rng.normal(size=(8, 4)), "W": rng.normal(size=(8, 5)), "b": rng.normal(size=5)}
    probe = rng.normal(size=(8, 5))
    leaves = {k: ag.parameter(v) for k, v in base.items()}
    grads = ag.backward(ag.sum_over_axis(edgeconv(leaves["f"], nb, leaves["W"], leaves["b"]) * probe))
    h = 1e-5
    for name in base:
        u = rng.normal(size=base[name].shape)

        def val(s):
            x = dict(base, **{name: base[name] + s * h * u})
            return np.sum(edgeconv_reference(x["f"], nb, x["W"], x["b"]) * probe)
        fd = (val(1) - val(-1)) / (2 * h)
        an = float(np.sum(grads[leaves[name]] * u))
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4, name


def test_embed_shape_and_nonnegative():
    params = init_embedder(CFG)
    F = embed(cloud(), CFG, params)
    assert F.shape == (40, 7)
    assert np.all(F.data >= 0)


def test_embed_permutation_equivariance():
    params = init_embedder(CFG)
    c = cloud(seed=5)
    perm = np.random.default_rng(6).permutation(len(c))
    a = embed(c, CFG, params).data
    b = embed(c.subset(perm), CFG, params).data
    assert np.max(np.abs(a[perm] - b)) < 1e-12


def test_embed_ignores_labels():
    params = init_embedder(CFG)
    c = cloud(seed=7)
    other = LabeledCloud(c.coords, (c.labels + 1) % 3, c.colors)
    assert np.array_equal(embed(c, CFG, params).data, embed(other, CFG, params).data)


def test_embed_translation_invariance():
    params = init_embedder(CFG)
    c = cloud(seed=8)
    moved = LabeledCloud(c.coords + np.array([10.0, 0, 0]), c.labels, c.colors)
    assert np.max(np.abs(embed(c, CFG, params).data - embed(moved, CFG, params).data)) < 1e-9


def test_embed_xyz_only():
    cfg = EmbedderConfig(input_channels=3, knn_k=4, edge_widths=(5,), head_hidden=6, feature_dim=3)
    assert embed(cloud(12), cfg, init_embedder(cfg)).shape == (12, 3)


def test_embed_rejects_small_cloud():
    with pytest.raises(ContractError, match="knn_k"):
        embed(cloud(6), CFG, init_embedder(CFG))


def test_init_glorot_bounds_and_seed():
    p = init_embedder(CFG)
    W = p["embedder.edge0.W"].data
    assert np.max(np.abs(W)) <= np.sqrt(6 / (12 + 8))
    assert np.array_equal(W, init_embedder(CFG)["embedder.edge0.W"].data)
    assert all(k.startswith("embedder.") for k in p)


def test_embed_gradient_fd_every_weight():
    params = init_embedder(CFG)
    c = cloud(20, seed=9)
    probe = np.random.default_rng(10).normal(size=(20, 7))
    loss = ag.sum_over_axis(embed(c, CFG, params) * probe)
    grads = ag.backward(loss, wrt=list(params.values()))
    rng = np.random.default_rng(11)
    h = 1e-5
    for name, p in params.items():
        u = rng.normal(size=p.shape)
        base = p.data.copy()

        def val(s):
            p.data = base + s * h * u
            try:
                return float(np.sum(embed(c, CFG, params).data * probe))
            finally:
                p.data = base
        fd = (val(1) - val(-1)) / (2 * h)
        an = float(np.sum(grads[p] * u))
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4, name
