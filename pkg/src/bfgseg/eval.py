"""mIoU evaluation, the module ablation ladder and hyper-parameter sweeps."""
import time
from dataclasses import dataclass, field

import numpy as np

from .config import VARIANTS, copy_config, dump_config
from .errors import ConfigError
from .fewshot import EpisodeSampler, SplitSpec, derive_seed, model_from_run, train

MEASURE_CODES = {"N": "l2norm", "IP": "inner_product"}
MEASURE_COMBOS = ("N/N", "N/IP", "IP/N", "IP/IP")
SWEEP_PARAMS = ("K", "lambda", "xi", "measure_combo")

# reference values on S3DIS, 2-way 1-shot, DGCNN with SAN; documentation only
PAPER_LADDER = {"baseline": 51.44, "spgen": 53.34, "spgen+po2prg": 54.39, "full_bfg": 55.79}


class IoUAccumulator:
    """Running TP/FP/FN counts per class id; class 0 (background) is never averaged."""

    def __init__(self):
        self.tp, self.fp, self.fn = {}, {}, {}

    def update(self, predictions, labels, classes=None):
        predictions = np.asarray(predictions, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if predictions.shape != labels.shape:
            raise ValueError(f"predictions {predictions.shape} vs labels {labels.shape}")
        ids = np.union1d(np.unique(predictions), np.unique(labels)) if classes is None else classes
        for c in ids:
            c = int(c)
            p, t = predictions == c, labels == c
            self.tp[c] = self.tp.get(c, 0) + int(np.sum(p & t))
            self.fp[c] = self.fp.get(c, 0) + int(np.sum(p & ~t))
            self.fn[c] = self.fn.get(c, 0) + int(np.sum(~p & t))

    def per_class(self):
        out = {}
        for c in sorted(self.tp):
            union = self.tp[c] + self.fp[c] + self.fn[c]
            if union > 0:
                out[c] = self.tp[c] / union
        return out

    def miou(self):
        fg = [v for c, v in self.per_class().items() if c != 0]
        return float(np.mean(fg)) if fg else 0.0


def miou(predictions, labels, n_classes=None):
    """(per-class IoU dict, mean IoU over foreground classes with nonzero union)."""
    acc = IoUAccumulator()
    classes = None if n_classes is None else range(n_classes)
    acc.update(predictions, labels, classes)
    return acc.per_class(), acc.miou()


@dataclass
class EvalReport:
    variant: str
    per_class_iou: dict
    miou: float
    episodes: int
    config: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


def eval_sampler(blocks, run):
    split = SplitSpec(run.data.split0, run.data.split1)
    return EpisodeSampler(blocks, split.classes(run.trainer.train_split, "test"),
                          run.data.block_points, run.data.min_points)


def train_sampler(blocks, run):
    split = SplitSpec(run.data.split0, run.data.split1)
    return EpisodeSampler(blocks, split.classes(run.trainer.train_split, "train"),
                          run.data.block_points, run.data.min_points)


def fixed_episodes(sampler, run, n=None):
    """The paired evaluation set: episode i uses seed derive_seed(eval.seed, i), no augmentation."""
    n = run.eval.episodes if n is None else n
    if n < 1:
        raise ConfigError("evaluation needs at least one episode")
    return [sampler.sample(run.trainer.way, run.trainer.shot, derive_seed(run.eval.seed, i))
            for i in range(n)]


def evaluate(model, episodes, variant=None, config_text=""):
    if not episodes:
        raise ConfigError("evaluation needs at least one episode")
    variant = variant or model.cfg.variant
    start = time.perf_counter()
    acc = IoUAccumulator()
    for ep in episodes:
        preds = model.predict(ep, variant)
        acc.update(ep.global_labels(preds), ep.global_labels(ep.query.labels),
                   classes=(0,) + tuple(ep.classes))
    return EvalReport(variant, acc.per_class(), acc.miou(), len(episodes), config_text,
                      time.perf_counter() - start)


def train_and_evaluate(blocks, run, episodes, variant=None, out_dir=None, progress=None):
    run = copy_config(run)
    if variant is not None:
        run.trainer.variant = variant
    model = model_from_run(run)
    result = train(model, train_sampler(blocks, run), run.trainer, out_dir=out_dir,
                   meta={"config": dump_config(run)}, progress=progress)
    report = evaluate(model, episodes, run.trainer.variant, dump_config(run))
    report.extra["final_loss"] = result.losses[-1]
    report.extra["losses"] = result.losses
    return report


def run_ablation(blocks, base_cfg, variants=VARIANTS, n_eval_episodes=None, progress=None):
    """Train every variant from identical seeds and score it on identical test episodes."""
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    episodes = fixed_episodes(eval_sampler(blocks, base_cfg), base_cfg, n_eval_episodes)
    return [train_and_evaluate(blocks, base_cfg, episodes, v, progress=progress) for v in variants]


SEED_FIELDS = ("data_seed", "trainer_seed", "eval_seed")


def seed_fields(run):
    return {"data_seed": run.data.seed, "trainer_seed": run.trainer.seed, "eval_seed": run.eval.seed}


def ladder_rows(reports, run=None):
    seeds = seed_fields(run) if run is not None else {}
    rows, first, prev = [], None, None
    for r in reports:
        first = r.miou if first is None else first
        delta = 0.0 if prev is None else r.miou - prev
        rows.append({"variant": r.variant, "miou": r.miou, "delta": delta,
                     "cumulative_delta": r.miou - first, "episodes": r.episodes,
                     "paper_miou": PAPER_LADDER.get(r.variant, float("nan")), **seeds})
        prev = r.miou
    return rows


LADDER_HEADER = ("variant", "miou", "delta", "cumulative_delta", "episodes",
                 "paper_miou") + SEED_FIELDS


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(h, "")) for h in header) + "\n")


EVAL_HEADER = ("variant", "class_id", "class_name", "iou", "episodes") + SEED_FIELDS


def eval_rows(report, run, class_names=None):
    """One row per foreground class, then a ``mean`` row holding the mIoU."""
    names = class_names or {}
    seeds = seed_fields(run)
    rows = [{"variant": report.variant, "class_id": c, "class_name": names.get(c, ""),
             "iou": v, "episodes": report.episodes, **seeds}
            for c, v in sorted(report.per_class_iou.items()) if c != 0]
    rows.append({"variant": report.variant, "class_id": "mean", "class_name": "",
                 "iou": report.miou, "episodes": report.episodes, **seeds})
    return rows


def apply_sweep_value(run, param, value):
    run = copy_config(run)
    if param == "K":
        run.prototype.k = int(value)
    elif param == "lambda":
        run.bfg.lam = float(value)
    elif param == "xi":
        run.bfg.xi = float(value)
    elif param == "measure_combo":
        parts = str(value).upper().split("/")
        if len(parts) != 2 or any(p not in MEASURE_CODES for p in parts):
            raise ConfigError(f"measure_combo value {value!r}: expected one of {MEASURE_COMBOS}")
        run.bfg.measure1, run.bfg.measure2 = (MEASURE_CODES[p] for p in parts)
    else:
        raise ConfigError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    return run.validate()


def default_sweep_values(param):
    return {"K": (1, 5, 10), "lambda": (0.5, 0.85, 1.0), "xi": (0.25, 0.5, 1.0),
            "measure_combo": MEASURE_COMBOS}[param]


SWEEP_HEADER = ("param", "value", "miou", "episodes") + SEED_FIELDS


def sweep(param, values, base_cfg, blocks, n_eval_episodes=None, progress=None):
    """One trained and evaluated run per value, all on the same seeds and test episodes."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    runs = [apply_sweep_value(base_cfg, param, v) for v in values]
    episodes = fixed_episodes(eval_sampler(blocks, base_cfg), base_cfg, n_eval_episodes)
    rows = []
    for v, run in zip(values, runs):
        report = train_and_evaluate(blocks, run, episodes, progress=progress)
        rows.append({"param": param, "value": v, "miou": report.miou, "episodes": report.episodes,
                     **seed_fields(run)})
    return rows
