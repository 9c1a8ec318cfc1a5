"""N-way K-shot episodes, the prototype/cosine segmentation head, the
cross-entropy loss and the episodic trainer.
"""
import json
import logging
import os
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .bfg import po2prg, pr2pog
from .config import VARIANTS, RunConfig
from .embedder import embed, init_embedder
from .errors import ConfigError, ContractError, NumericError, SamplingError
from .pointcloud import ClassMask, LabeledCloud, augment, sample_block
from .prototype import apply_mask, assemble, init_spa, masked_average, pool_masked, spgen

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
# number of feature/prototype norms clamped at NORM_EPS since import
norm_clamp_events = 0


@dataclass
class SplitSpec:
    s0: tuple
    s1: tuple

    def __post_init__(self):
        self.s0, self.s1 = tuple(int(c) for c in self.s0), tuple(int(c) for c in self.s1)
        if not self.s0 or not self.s1 or set(self.s0) & set(self.s1):
            raise ConfigError("SplitSpec: splits must be nonempty and disjoint")

    def classes(self, train_split, side):
        """Class pool for ``side`` when ``train_split`` is the training split."""
        if train_split not in ("s0", "s1") or side not in ("train", "test"):
            raise ConfigError(f"bad split/side {train_split}/{side}")
        use_s0 = (train_split == "s0") == (side == "train")
        return self.s0 if use_s0 else self.s1


@dataclass
class Episode:
    """Support clouds are indexed ``support[class_index][shot]``.

    All labels are episode labels: 0 is background and episode class i
    (global id ``classes[i - 1]``) is label i.
    """

    way: int
    shot: int
    classes: tuple
    support: list
    query: LabeledCloud
    seed: int = 0
    blocks: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return self.way + 1

    def support_mask(self, class_index, shot):
        cloud = self.support[class_index - 1][shot]
        return ClassMask(class_index, cloud.labels == class_index)

    def global_labels(self, episode_labels):
        lut = np.array((0,) + tuple(self.classes))
        return lut[np.asarray(episode_labels)]


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def _remap(cloud, classes):
    labels = np.zeros(len(cloud), dtype=np.int64)
    for i, c in enumerate(classes):
        labels[cloud.labels == c] = i + 1
    return LabeledCloud(cloud.coords, labels, cloud.colors)


class EpisodeSampler:
    """Samples episodes from a fixed list of blocks.

    A block is eligible for class c when it holds at least ``min_points``
    points of c. The query block must be eligible for every episode class;
    support blocks are drawn per class from the other eligible blocks.
    """

    max_class_draws = 50

    def __init__(self, blocks, classes, n_points=512, min_points=100, class_names=None):
        self.blocks = blocks
        self.classes = tuple(int(c) for c in classes)
        self.n_points = n_points
        self.min_points = min_points
        self.class_names = class_names or {}
        counts = [b.class_counts() for b in blocks]
        self.eligible = {c: np.array([i for i, cc in enumerate(counts)
                                      if cc.get(c, 0) >= min_points], dtype=np.int64)
                         for c in self.classes}

    def _name(self, c):
        return f"{c} ({self.class_names[c]})" if c in self.class_names else str(c)

    def _draw(self, block_idx, seed, aug):
        cloud = sample_block(self.blocks[block_idx], self.n_points, derive_seed(seed, 1))
        if aug is not None:
            sigma, rotate = aug
            cloud = augment(cloud, sigma, rotate, derive_seed(seed, 2))
        return cloud

    def _draw_support(self, rng, chosen, q_idx, shot, seed, aug):
        support, picked = [], []
        for c in chosen:
            pool = self.eligible[c][self.eligible[c] != q_idx]
            if len(pool) < shot:
                raise SamplingError(f"class {self._name(c)}: {len(pool)} support blocks for {shot}-shot")
            picks = rng.choice(pool, size=shot, replace=False)
            shots = []
            for b in picks:
                for attempt in range(10):
                    cloud = self._draw(int(b), derive_seed(seed, int(b), attempt), aug)
                    if np.any(cloud.labels == c):
                        break
                else:
                    raise SamplingError(f"class {self._name(c)} vanished from support block {b}")
                shots.append(_remap(cloud, chosen))
            support.append(shots)
            picked.append([int(b) for b in picks])
        return support, picked

    def sample(self, way, shot, seed, aug=None):
        if way > len(self.classes):
            raise SamplingError(f"{way}-way episode needs {way} classes, split has {len(self.classes)}")
        for c in self.classes:
            if len(self.eligible[c]) == 0:
                raise SamplingError(f"no eligible block for class {self._name(c)}")
        rng = np.random.default_rng(seed)
        for _ in range(self.max_class_draws):
            chosen = tuple(int(c) for c in rng.choice(self.classes, size=way, replace=False))
            common = self.eligible[chosen[0]]
            for c in chosen[1:]:
                common = np.intersect1d(common, self.eligible[c])
            if len(common):
                break
        else:
            raise SamplingError(f"no query block holds all classes of any draw; last: "
                                f"{', '.join(self._name(c) for c in chosen)}")
        q_idx = int(rng.choice(common))
        for _ in range(self.max_class_draws):
            support, picked = self._draw_support(rng, chosen, q_idx, shot, seed, aug)
            if any(np.any(cloud.labels == 0) for shots in support for cloud in shots):
                break
        else:
            raise SamplingError("no support draw contains background points for classes "
                                f"{', '.join(self._name(c) for c in chosen)}")
        used = {"query": q_idx, "support": picked}
        for attempt in range(10):
            query = self._draw(q_idx, derive_seed(seed, q_idx, 1000 + attempt), aug)
            if all(np.any(query.labels == c) for c in chosen):
                break
        else:
            raise SamplingError(f"query block {q_idx} lost an episode class during sampling")
        return Episode(way, shot, chosen, support, _remap(query, chosen), seed, used)


def sample_episode(blocks, split, side, way, shot, seed, train_split="s0", n_points=512,
                   min_points=100, aug=None):
    sampler = EpisodeSampler(blocks, split.classes(train_split, side), n_points, min_points)
    return sampler.sample(way, shot, seed, aug)


# model

@dataclass
class ModelConfig:
    embedder: object
    bfg: object
    k: int = 5
    seed_space: str = "feature"
    tau: float = 10.0
    variant: str = "full_bfg"
    spa_seed: int = 1

    @classmethod
    def from_run(cls, run):
        return cls(run.embedder, run.bfg, run.prototype.k, run.prototype.seed_space,
                   run.trainer.tau, run.trainer.variant, run.prototype.spa_seed)


def init_params(cfg):
    params = init_embedder(cfg.embedder)
    params.update(init_spa(cfg.embedder.feature_dim, cfg.spa_seed))
    return params


def class_prototype(masked, params, cfg, variant):
    """One class's prototype vector for the given ablation variant."""
    if variant == "baseline":
        return ag.reshape(masked_average(masked).features, (-1,))
    protos = spgen(masked, cfg.k, cfg.seed_space)
    if variant in ("spgen+po2prg", "full_bfg"):
        protos = po2prg(masked, protos, cfg.bfg)
    if variant == "full_bfg":
        _, protos = pr2pog(masked, protos, cfg.bfg)
    return assemble(protos, params)


def support_prototypes(ep, params, cfg, variant=None, support_features=None):
    """Prototypes for background (index 0) and each episode class, in label order."""
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if support_features is None:
        support_features = [[embed(cloud, cfg.embedder, params) for cloud in shots]
                            for shots in ep.support]
    bg_parts, out = [], []
    for ci in range(1, ep.way + 1):
        parts = []
        for s, cloud in enumerate(ep.support[ci - 1]):
            feats = support_features[ci - 1][s]
            parts.append(apply_mask(feats, cloud, ClassMask(ci, cloud.labels == ci)))
            bg = cloud.labels == 0
            if bg.any():
                bg_parts.append(apply_mask(feats, cloud, ClassMask(0, bg)))
        out.append(class_prototype(pool_masked(parts), params, cfg, variant))
    if not bg_parts:
        raise ContractError("episode support has no background points")
    out.insert(0, class_prototype(pool_masked(bg_parts), params, cfg, variant))
    return out


def classify_query(query_features, prototypes, tau):
    """Logits tau * cos(F_Q[n], z_c) and argmax predictions (ties to the lower class)."""
    global norm_clamp_events
    fq = ag.as_tensor(query_features)
    z = ag.concat([ag.reshape(p, (1, -1)) for p in prototypes], axis=0)
    if fq.shape[1] != z.shape[1]:
        raise ContractError(f"classify_query: features {fq.shape} vs prototypes {z.shape}")
    nq, nz = ag.l2_row_norms(fq), ag.l2_row_norms(z)
    clamped = int(np.sum(nq.data <= NORM_EPS) + np.sum(nz.data <= NORM_EPS))
    if clamped:
        norm_clamp_events += clamped
        log.debug("clamped %d zero norms in classify_query", clamped)
    unit_q = fq / ag.reshape(ag.clamp_min(nq, NORM_EPS), (-1, 1))
    unit_z = z / ag.reshape(ag.clamp_min(nz, NORM_EPS), (-1, 1))
    logits = tau * ag.matmul(unit_q, ag.transpose(unit_z))
    return logits, np.argmax(logits.data, axis=1)


def episode_loss(logits, labels):
    """Mean cross-entropy of the per-point logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"episode_loss: labels {labels.shape} out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return -ag.sum_over_axis(ag.log_softmax(logits, axis=1) * onehot) / float(n)


class FewShotModel:
    def __init__(self, cfg, params=None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    @property
    def embedder_params(self):
        return {k: v for k, v in self.params.items() if k.startswith("embedder.")}

    @property
    def rest_params(self):
        return {k: v for k, v in self.params.items() if not k.startswith("embedder.")}

    def forward(self, ep, variant=None):
        protos = support_prototypes(ep, self.params, self.cfg, variant)
        fq = embed(ep.query, self.cfg.embedder, self.params)
        return classify_query(fq, protos, self.cfg.tau)

    def loss(self, ep, variant=None):
        logits, preds = self.forward(ep, variant)
        return episode_loss(logits, ep.query.labels), preds

    def predict(self, ep, variant=None):
        return self.forward(ep, variant)[1]

    def state_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise ContractError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise ContractError(f"checkpoint parameter {name} has shape "
                                    f"{arrays[name].shape}, model expects {p.shape}")
            p.data = arrays[name].astype(np.float64).copy()


# training

@dataclass
class TrainResult:
    losses: list
    model: FewShotModel
    iteration: int
    checkpoint: str = None


def _episode_stream(sampler, tcfg, start, stop, prefetch):
    aug = (tcfg.jitter, tcfg.rotate) if (tcfg.jitter > 0 or tcfg.rotate) else None

    def make(it):
        seed = derive_seed(tcfg.seed, it)
        return it, seed, sampler.sample(tcfg.way, tcfg.shot, seed, aug)

    if prefetch <= 0:
        for it in range(start, stop):
            yield make(it)
        return
    # bounded hand-off: one producer thread, single-owner consumer
    q = queue.Queue(maxsize=prefetch)
    stop_flag = threading.Event()

    def producer():
        for it in range(start, stop):
            if stop_flag.is_set():
                return
            try:
                item = make(it)
            except Exception as exc:  # forwarded to the consumer
                q.put(exc)
                return
            q.put(item)

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    try:
        for _ in range(start, stop):
            item = q.get()
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop_flag.set()


def make_optimizer(model, tcfg):
    return ag.Adam([(model.embedder_params, tcfg.lr_embedder), (model.rest_params, tcfg.lr_rest)],
                   tcfg.beta1, tcfg.beta2, tcfg.eps)


def save_training_checkpoint(path, model, opt, iteration, losses, meta=None):
    arrays = {f"param.{k}": v for k, v in model.state_arrays().items()}
    arrays.update(opt.state_arrays())
    record = dict(meta or {})
    record.update({"iteration": iteration, "adam_t": opt.t, "losses": losses})
    ag.save_checkpoint(path, arrays, record)


def load_model_arrays(arrays):
    return {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}


def train(model, sampler, tcfg, out_dir=None, resume=None, meta=None, progress=None):
    """Episodic training with Adam: embedder and the rest use separate learning rates.

    Iteration ``it`` always uses episode seed ``derive_seed(trainer.seed, it)``,
    so a resumed run reproduces an uninterrupted one exactly.
    """
    tcfg.validate()
    opt = make_optimizer(model, tcfg)
    losses, start = [], 0
    if resume is not None:
        arrays, record = ag.load_checkpoint(resume)
        model.load_state_arrays(load_model_arrays(arrays))
        opt.load_state_arrays(arrays, record["adam_t"])
        losses = list(record["losses"])
        start = int(record["iteration"])
    ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    params = list(model.params.values())
    for it, seed, ep in _episode_stream(sampler, tcfg, start, tcfg.iterations, tcfg.prefetch):
        opt.zero_grad()
        try:
            loss, _ = model.loss(ep, tcfg.variant)
            ag.backward(loss, wrt=params)
        except NumericError as exc:
            if out_dir is not None:
                with open(os.path.join(out_dir, "diagnostic.json"), "w") as fh:
                    json.dump({"iteration": it, "episode_seed": seed, "classes": list(ep.classes),
                               "blocks": ep.blocks, "error": str(exc)}, fh, indent=2)
            raise NumericError(f"non-finite value at iteration {it} (episode seed {seed}): {exc}") from exc
        opt.step()
        losses.append(float(loss.data))
        if progress is not None:
            progress(it, losses[-1])
        done = it + 1
        if ckpt_path and (done % max(1, tcfg.checkpoint_every) == 0 or done == tcfg.iterations):
            save_training_checkpoint(ckpt_path, model, opt, done, losses, meta)
            write_loss_csv(os.path.join(out_dir, "loss.csv"), losses)
    return TrainResult(losses, model, max(start, len(losses)), ckpt_path)


def write_loss_csv(path, losses):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def model_from_run(run, params=None):
    return FewShotModel(ModelConfig.from_run(run), params)


__all__ = ["SplitSpec", "Episode", "EpisodeSampler", "sample_episode", "ModelConfig",
           "FewShotModel", "support_prototypes", "classify_query", "episode_loss", "train",
           "RunConfig"]
