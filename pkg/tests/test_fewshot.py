import json
import math

import numpy as np
import pytest

import oracles
from bfgseg import autograd as ag
from bfgseg import fewshot
from bfgseg.config import VARIANTS, copy_config
from bfgseg.embedder import embed
from bfgseg.errors import ContractError, NumericError, SamplingError
from bfgseg.eval import eval_sampler, train_sampler
from bfgseg.fewshot import (EpisodeSampler, ModelConfig, SplitSpec, class_prototype,
                            classify_query, derive_seed, episode_loss, model_from_run,
                            sample_episode, support_prototypes, train)
from bfgseg.prototype import MaskedPoints, spa_mlp


@pytest.fixture(scope="module")
def sampler(run_small, blocks_small):
    return train_sampler(blocks_small, run_small)


def test_episode_shape_contract(sampler):
    ep = sampler.sample(2, 1, seed=5)
    assert ep.way == 2 and ep.shot == 1 and len(ep.classes) == 2
    assert len(ep.support) == 2 and all(len(s) == 1 for s in ep.support)
    assert set(np.unique(ep.query.labels)) <= {0, 1, 2}
    for ci in (1, 2):
        assert np.any(ep.query.labels == ci)
        assert ep.support_mask(ci, 0).count > 0
    assert len(ep.query) == 512
    assert any(np.any(c.labels == 0) for s in ep.support for c in s)


def test_two_shot_episode(sampler):
    ep = sampler.sample(2, 2, seed=6)
    assert all(len(s) == 2 for s in ep.support)


def test_episode_determinism(sampler):
    a, b = sampler.sample(2, 1, seed=9), sampler.sample(2, 1, seed=9)
    assert a.classes == b.classes and a.blocks == b.blocks
    assert np.array_equal(a.query.coords, b.query.coords)
    assert np.array_equal(a.support[1][0].coords, b.support[1][0].coords)


def test_no_test_class_leaks_into_training(run_small, blocks_small):
    split = SplitSpec(run_small.data.split0, run_small.data.split1)
    test_classes = set(split.s1)
    s = EpisodeSampler(blocks_small, split.classes("s0", "train"), 512, 100)
    seen = set()
    for i in range(1000):
        ep = s.sample(2, 1, seed=derive_seed(42, i))
        assert not set(ep.classes) & test_classes
        seen |= set(ep.classes)
    assert seen == set(split.s0)


def test_missing_class_names_it(blocks_small):
    with pytest.raises(SamplingError, match="99"):
        EpisodeSampler(blocks_small, (1, 99), 512, 100).sample(2, 1, 0)


def test_sample_episode_wrapper(run_small, blocks_small):
    split = SplitSpec(run_small.data.split0, run_small.data.split1)
    ep = sample_episode(blocks_small, split, "test", 2, 1, seed=3)
    assert set(ep.classes) <= set(split.s1)


def test_split_spec_rejects_overlap():
    with pytest.raises(Exception):
        SplitSpec((1, 2), (2, 3))


# head and loss

def test_uniform_logits_loss_is_ln3():
    loss = episode_loss(ag.Tensor(np.zeros((5, 3))), [0, 1, 2, 1, 0])
    assert abs(float(loss.data) - math.log(3)) < 1e-12


def test_extreme_correct_logits_loss_vanishes():
    logits = np.full((4, 3), -50.0)
    labels = np.array([0, 2, 1, 2])
    logits[np.arange(4), labels] = 50.0
    assert 0 <= float(episode_loss(ag.Tensor(logits), labels).data) < 1e-40


def test_loss_gradient_fd():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(16, 3))
    labels = rng.integers(0, 3, 16)
    x = ag.parameter(x0)
    g = ag.backward(episode_loss(x, labels))[x]
    h = 1e-5
    u = rng.normal(size=x0.shape)
    val = lambda s: float(episode_loss(ag.Tensor(x0 + s * h * u), labels).data)
    fd = (val(1) - val(-1)) / (2 * h)
    assert abs(fd - np.sum(g * u)) / abs(fd) < 1e-4


def test_loss_rejects_bad_labels():
    with pytest.raises(ContractError):
        episode_loss(ag.Tensor(np.zeros((2, 3))), [0, 3])


def test_classify_orthogonal_case():
    z = [ag.Tensor([1.0, 0, 0]), ag.Tensor([0, 1.0, 0]), ag.Tensor([0, 0, 1.0])]
    logits, pred = classify_query(np.array([[0, 2.0, 0]]), z, 10.0)
    assert np.allclose(logits.data, [[0, 10, 0]], atol=1e-12) and pred.tolist() == [1]


def test_classify_identical_prototypes_tie_to_background():
    z = [ag.Tensor([1.0, 2.0])] * 3
    logits, pred = classify_query(np.random.default_rng(1).random((6, 2)), z, 10.0)
    assert np.all(logits.data == logits.data[:, :1]) and np.all(pred == 0)


def test_cosine_range():
    rng = np.random.default_rng(2)
    for _ in range(50):
        z = [ag.Tensor(rng.normal(size=5)) for _ in range(3)]
        logits, _ = classify_query(rng.normal(size=(20, 5)), z, 7.0)
        assert np.all(np.abs(logits.data / 7.0) <= 1 + 1e-12)


def test_zero_norm_is_clamped_and_counted():
    before = fewshot.norm_clamp_events
    logits, _ = classify_query(np.zeros((2, 3)), [ag.Tensor([1.0, 0, 0]), ag.Tensor([0, 1.0, 0])], 10)
    assert np.all(logits.data == 0) and fewshot.norm_clamp_events == before + 2


# prototypes per variant

def _model(run, **kw):
    run = copy_config(run)
    for k, v in kw.items():
        setattr(run.prototype if k == "k" else run.trainer, k, v)
    return model_from_run(run)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("k", [1, 5])
def test_prototype_count(sampler, run_small, variant, k):
    model = _model(run_small, k=k)
    ep = sampler.sample(2, 1, seed=11)
    protos = support_prototypes(ep, model.params, model.cfg, variant)
    assert len(protos) == ep.way + 1
    assert all(p.shape == (run_small.embedder.feature_dim,) for p in protos)


def test_baseline_is_protonet_bit_identical(sampler, run_small):
    model = _model(run_small)
    ep = sampler.sample(2, 2, seed=12)
    protos = support_prototypes(ep, model.params, model.cfg, "baseline")
    feats = [[embed(c, model.cfg.embedder, model.params).data for c in s] for s in ep.support]
    for ci in (1, 2):
        rows = np.concatenate([f[c.labels == ci] for f, c in zip(feats[ci - 1], ep.support[ci - 1])])
        assert np.array_equal(protos[ci].data, oracles.row_mean(rows))
    bg = np.concatenate([f[c.labels == 0] for fs, cs in zip(feats, ep.support)
                         for f, c in zip(fs, cs)])
    assert np.array_equal(protos[0].data, oracles.row_mean(bg))


def test_full_bfg_k1_constant_field(run_small):
    cfg = ModelConfig.from_run(run_small)
    cfg.k = 1
    model = fewshot.FewShotModel(cfg)
    v = np.linspace(0.1, 1.0, run_small.embedder.feature_dim)
    mp = MaskedPoints(1, ag.Tensor(np.tile(v, (7, 1))), np.random.default_rng(0).random((7, 3)),
                      np.arange(7))
    full = class_prototype(mp, model.params, cfg, "full_bfg").data
    base = class_prototype(mp, model.params, cfg, "baseline").data
    assert np.allclose(base, v, atol=1e-15)
    expected = spa_mlp(ag.Tensor(2 * v[None, :]), model.params).data[0]
    assert np.allclose(full, expected, atol=1e-13)


# training

def test_zero_lr_leaves_parameters(run_small, blocks_small):
    run = copy_config(run_small)
    run.trainer.lr_embedder = run.trainer.lr_rest = 0.0
    run.trainer.iterations = 10
    model = model_from_run(run)
    before = {k: v.data.copy() for k, v in model.params.items()}
    train(model, train_sampler(blocks_small, run), run.trainer)
    assert all(np.array_equal(before[k], v.data) for k, v in model.params.items())


def test_resume_is_bit_identical(run_small, blocks_small, tmp_path):
    full = train(model_from_run(run_small), train_sampler(blocks_small, run_small),
                 run_small.trainer, out_dir=tmp_path / "a")
    part = copy_config(run_small)
    part.trainer.iterations = 3
    train(model_from_run(part), train_sampler(blocks_small, part), part.trainer,
          out_dir=tmp_path / "b")
    resumed_model = model_from_run(run_small)
    resumed = train(resumed_model, train_sampler(blocks_small, run_small), run_small.trainer,
                    out_dir=tmp_path / "b", resume=tmp_path / "b" / "checkpoint.npz")
    assert resumed.losses == full.losses
    for k, v in full.model.params.items():
        assert np.array_equal(v.data, resumed_model.params[k].data)
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (tmp_path / "a" / "loss.csv").read_text().splitlines()[0] == "iteration,loss"


def test_prefetch_matches_sequential(run_small, blocks_small):
    seq = train(model_from_run(run_small), train_sampler(blocks_small, run_small), run_small.trainer)
    run = copy_config(run_small)
    run.trainer.prefetch = 2
    pre = train(model_from_run(run), train_sampler(blocks_small, run), run.trainer)
    assert seq.losses == pre.losses


def test_numeric_failure_dumps_episode_seed(run_small, blocks_small, tmp_path, monkeypatch):
    model = model_from_run(run_small)

    def boom(ep, variant=None):
        raise NumericError("non-finite value produced by exp")
    monkeypatch.setattr(model, "loss", boom)
    with pytest.raises(NumericError, match="episode seed"):
        train(model, train_sampler(blocks_small, run_small), run_small.trainer, out_dir=tmp_path)
    diag = json.loads((tmp_path / "diagnostic.json").read_text())
    assert diag["iteration"] == 0 and diag["episode_seed"] == derive_seed(run_small.trainer.seed, 0)


def test_state_shape_mismatch_reports_both_shapes(run_small):
    model = model_from_run(run_small)
    arrays = model.state_arrays()
    arrays["spa.fc1.b"] = np.zeros(3)
    with pytest.raises(ContractError, match=r"\(3,\).*\(64,\)"):
        model.load_state_arrays(arrays)


def test_eval_sampler_uses_test_classes(run_small, blocks_small):
    s = eval_sampler(blocks_small, run_small)
    assert set(s.classes) == set(run_small.data.split1)
    run = copy_config(run_small)
    run.trainer.train_split = "s1"
    assert set(eval_sampler(blocks_small, run).classes) == set(run_small.data.split0)
