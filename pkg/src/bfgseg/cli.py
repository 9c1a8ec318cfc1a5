"""``bfgseg`` command line: data generation, training, evaluation, ablation,
sweeps and PLY export.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
Every failure prints exactly one line to stderr::

    bfgseg: error[<kind>]: <reason>
"""
import argparse
import os
import sys
import zipfile

import numpy as np

from . import __version__
from .autograd import load_checkpoint
from .config import VARIANTS, dump_config, format_value, iter_keys, load_config, parse_config_text
from .dataset import in_memory_dataset, load_dataset, write_dataset
from .errors import BFGError, ConfigError, DataError
from .eval import (EVAL_HEADER, LADDER_HEADER, SWEEP_HEADER, SWEEP_PARAMS, default_sweep_values,
                   eval_rows, eval_sampler, evaluate, fixed_episodes, ladder_rows, run_ablation,
                   sweep, train_sampler, write_csv)
from .fewshot import load_model_arrays, model_from_run, train
from .pointcloud import SceneSpec, write_ply

CONFIG_SNAPSHOT = "config.txt"
CHECKPOINT = "checkpoint.npz"
ERROR_KINDS = {2: "config", 3: "data", 4: "numeric"}
# keys allowed to differ between a checkpoint and the run that resumes it
RESUME_FREE_KEYS = ("trainer.iterations", "trainer.checkpoint_every", "trainer.prefetch",
                    "output.dir", "eval.episodes", "eval.seed")

LAYOUT = """output directory layout:
  config.txt                   resolved config snapshot (every key, seeds included)
  checkpoint.npz               parameters, optimizer state, iteration, loss history
  loss.csv                     iteration,loss
  eval.csv                     per-class IoU and the mean row
  ablation.csv                 four-variant ladder
  sweep_<param>.csv            one row per swept value
  viz/episode_<seed>_gt.ply    query ground truth
  viz/episode_<seed>_pred.ply  query prediction
  diagnostic.json              written only when training hits a non-finite value"""


def _keys_epilog():
    lines = ["config keys (file lines 'key = value', or --set key=value) and defaults:"]
    lines += [f"  {k} = {format_value(v)}" for k, v in iter_keys()]
    return "\n".join(lines) + "\n\n" + LAYOUT


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p, seed_help):
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable, applied after --config")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    p.add_argument("--quiet", action="store_true", help="no progress output")


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = _keys_epilog()
    parser = _Parser(prog="bfgseg", description="Few-shot point cloud segmentation with "
                     "bidirectional feature globalization.", epilog=epilog, formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"bfgseg {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                              formatter_class=fmt)

    p = add("gen-data", "generate the synthetic scene dataset")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, help="sets data.seed")
    p.add_argument("--out", required=True)

    p = add("train", "episodic training; resumes from OUT/checkpoint.npz when present")
    _common(p, "sets trainer.seed")
    p.add_argument("--split", choices=("s0", "s1"), help="sets trainer.train_split")
    p.add_argument("--variant", choices=VARIANTS, help="sets trainer.variant")
    p.add_argument("--iterations", type=int, help="sets trainer.iterations")
    p.add_argument("--out", help="output directory (default: output.dir)")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")

    p = add("eval", "mIoU of a checkpoint on fixed test episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, help="sets eval.episodes (must be >= 1)")
    p.add_argument("--seed", type=int, help="sets eval.seed")
    p.add_argument("--variant", choices=VARIANTS, help="forward path (default: trained variant)")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")

    p = add("ablate", "train and evaluate the four variants on paired episodes")
    _common(p, "sets trainer.seed")
    p.add_argument("--episodes", type=int, help="sets eval.episodes")
    p.add_argument("--out", help="output directory (default: output.dir)")

    p = add("sweep", "train and evaluate once per value of one hyper-parameter")
    _common(p, "sets trainer.seed")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", help="comma-separated values (default: a built-in grid)")
    p.add_argument("--episodes", type=int, help="sets eval.episodes")
    p.add_argument("--out", help="output directory (default: output.dir)")

    p = add("export-viz", "write ground-truth and predicted PLY files for one test episode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode-seed", type=int, required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    return parser


# helpers

def _progress(quiet, label, every=50):
    if quiet:
        return None

    def report(it, loss):
        if (it + 1) % every == 0:
            print(f"{label} iteration {it + 1} loss {loss:.6f}", file=sys.stderr, flush=True)
    return report


def _resolve(args, seed_key=None):
    run = load_config(args.config, args.set)
    if seed_key and getattr(args, "seed", None) is not None:
        parse_config_text(f"{seed_key} = {args.seed}", run)
    return run


def _blocks(run, data_dir):
    if data_dir is None:
        return in_memory_dataset(run.data)
    blocks, manifest = load_dataset(data_dir)
    if manifest.get("seed") != run.data.seed:
        raise ConfigError(f"dataset {data_dir} was generated with data.seed={manifest.get('seed')}, "
                          f"config has {run.data.seed}")
    return blocks


def _out_dir(args, run):
    out = args.out or run.output.dir
    run.output.dir = out
    os.makedirs(out, exist_ok=True)
    return out


def _snapshot(out, run, name=CONFIG_SNAPSHOT):
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        fh.write(dump_config(run))


def _read_checkpoint(path):
    try:
        arrays, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from None
    if "config" not in meta:
        raise DataError(f"checkpoint {path} carries no config record")
    return arrays, meta


def _model_from_checkpoint(path):
    arrays, meta = _read_checkpoint(path)
    run = parse_config_text(meta["config"]).validate()
    model = model_from_run(run)
    model.load_state_arrays(load_model_arrays(arrays))
    return model, run


def _config_diff(a, b, free=RESUME_FREE_KEYS):
    da = dict(line.split(" = ", 1) for line in a.splitlines() if " = " in line)
    db = dict(line.split(" = ", 1) for line in b.splitlines() if " = " in line)
    return sorted(k for k in set(da) | set(db) if k not in free and da.get(k) != db.get(k))


# commands

def cmd_gen_data(args):
    run = _resolve(args, "data.seed")
    os.makedirs(args.out, exist_ok=True)
    manifest = write_dataset(run.data, args.out)
    _snapshot(args.out, run)
    print(f"wrote {len(manifest['scenes'])} scenes, {manifest['n_blocks']} blocks to {args.out}")


def cmd_train(args):
    run = _resolve(args, "trainer.seed")
    if args.split:
        run.trainer.train_split = args.split
    if args.variant:
        run.trainer.variant = args.variant
    if args.iterations is not None:
        run.trainer.iterations = args.iterations
    run.validate()
    out = _out_dir(args, run)
    ckpt = os.path.join(out, CHECKPOINT)
    resume = None
    if os.path.exists(ckpt) and not args.fresh:
        _, meta = _read_checkpoint(ckpt)
        diff = _config_diff(meta["config"], dump_config(run))
        if diff:
            raise ConfigError(f"{ckpt} was trained with a different config ({', '.join(diff[:5])}); "
                              "use --fresh or another --out")
        if meta["iteration"] > run.trainer.iterations:
            raise ConfigError(f"{ckpt} is at iteration {meta['iteration']}, "
                              f"beyond trainer.iterations={run.trainer.iterations}")
        resume = ckpt
    blocks = _blocks(run, args.data)
    _snapshot(out, run)
    model = model_from_run(run)
    result = train(model, train_sampler(blocks, run), run.trainer, out_dir=out, resume=resume,
                   meta={"config": dump_config(run)}, progress=_progress(args.quiet, "train"))
    where = "resumed" if resume else "trained"
    last = f" final loss {result.losses[-1]:.6f}" if result.losses else ""
    print(f"{where} {run.trainer.variant} to iteration {result.iteration}{last}; outputs in {out}")


def cmd_eval(args):
    if args.episodes is not None and args.episodes < 1:
        raise ConfigError(f"--episodes must be >= 1, got {args.episodes}")
    model, run = _model_from_checkpoint(args.checkpoint)
    if args.episodes is not None:
        run.eval.episodes = args.episodes
    if args.seed is not None:
        run.eval.seed = args.seed
    run.validate()
    variant = args.variant or run.trainer.variant
    blocks = _blocks(run, args.data)
    os.makedirs(args.out, exist_ok=True)
    _snapshot(args.out, run)
    episodes = fixed_episodes(eval_sampler(blocks, run), run)
    report = evaluate(model, episodes, variant, dump_config(run))
    write_csv(os.path.join(args.out, "eval.csv"), EVAL_HEADER,
              eval_rows(report, run, SceneSpec().class_names))
    print(f"{variant} mIoU {report.miou:.4f} over {report.episodes} episodes; "
          f"wrote {os.path.join(args.out, 'eval.csv')}")


def cmd_ablate(args):
    run = _resolve(args, "trainer.seed")
    if args.episodes is not None:
        run.eval.episodes = args.episodes
    run.validate()
    out = _out_dir(args, run)
    blocks = _blocks(run, args.data)
    _snapshot(out, run)
    reports = run_ablation(blocks, run, progress=_progress(args.quiet, "ablate"))
    path = os.path.join(out, "ablation.csv")
    write_csv(path, LADDER_HEADER, ladder_rows(reports, run))
    for r in reports:
        print(f"{r.variant:14s} mIoU {r.miou:.4f}")
    print(f"wrote {path}")


def _parse_values(param, raw):
    if raw is None:
        return list(default_sweep_values(param))
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    return values


def cmd_sweep(args):
    run = _resolve(args, "trainer.seed")
    if args.episodes is not None:
        run.eval.episodes = args.episodes
    run.validate()
    values = _parse_values(args.param, args.values)
    out = _out_dir(args, run)
    blocks = _blocks(run, args.data)
    _snapshot(out, run)
    rows = sweep(args.param, values, run, blocks, progress=_progress(args.quiet, "sweep"))
    path = os.path.join(out, f"sweep_{args.param}.csv")
    write_csv(path, SWEEP_HEADER, rows)
    for r in rows:
        print(f"{args.param}={r['value']} mIoU {r['miou']:.4f}")
    print(f"wrote {path}")


def cmd_export_viz(args):
    model, run = _model_from_checkpoint(args.checkpoint)
    variant = args.variant or run.trainer.variant
    blocks = _blocks(run, args.data)
    episode = eval_sampler(blocks, run).sample(run.trainer.way, run.trainer.shot, args.episode_seed)
    pred = episode.global_labels(model.predict(episode, variant))
    truth = episode.global_labels(episode.query.labels)
    viz = os.path.join(args.out, "viz")
    os.makedirs(viz, exist_ok=True)
    comments = [f"episode_seed {args.episode_seed}", f"data_seed {run.data.seed}",
                f"trainer_seed {run.trainer.seed}", f"variant {variant}",
                "classes " + " ".join(str(c) for c in episode.classes)]
    base = os.path.join(viz, f"episode_{args.episode_seed}")
    write_ply(base + "_gt.ply", episode.query.coords, truth, comments + ["labels ground_truth"])
    write_ply(base + "_pred.ply", episode.query.coords, pred, comments + ["labels predicted"])
    print(f"wrote {base}_gt.ply and {base}_pred.ply ({len(truth)} vertices each)")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "export-viz": cmd_export_viz}


def _fail(kind, message):
    print(f"bfgseg: error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("missing command; one of " + ", ".join(COMMANDS))
        # non-finite results are caught and reported by the autograd checks
        with np.errstate(all="ignore"):
            COMMANDS[args.command](args)
    except BFGError as exc:
        code = exc.exit_code if exc.exit_code in ERROR_KINDS else 4
        _fail(ERROR_KINDS[code], exc)
        return code
    except FloatingPointError as exc:
        _fail("numeric", exc)
        return 4
    except OSError as exc:
        _fail("data", f"{exc.filename or ''}: {exc.strerror or exc}")
        return 3
    except KeyboardInterrupt:
        _fail("interrupted", "stopped by user; rerun the same command to resume")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
