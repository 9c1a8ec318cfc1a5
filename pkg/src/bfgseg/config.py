"""Run configuration: nested dataclasses plus a flat ``section.key = value`` file format.

File format (UTF-8 text)::

    # comment
    data.n_scenes = 24
    embedder.edge_widths = [32, 64]
    bfg.ip_sign = aligned

Values are JSON literals; anything that does not parse as JSON is taken as a
bare string. Unknown keys are rejected.
"""
import dataclasses
import json
from dataclasses import dataclass, field

from .bfg import SimilarityConfig
from .embedder import EmbedderConfig
from .errors import ConfigError

VARIANTS = ("baseline", "spgen", "spgen+po2prg", "full_bfg")


@dataclass
class DataConfig:
    n_scenes: int = 36
    scene_points: int = 24000
    room_size: float = 3.5
    deformation: float = 0.02
    clutter_fraction: float = 0.05
    color_noise: float = 0.05
    objects_per_scene: int = 4
    seed: int = 0
    block_size: float = 1.0
    block_points: int = 512
    min_points: int = 100
    split0: tuple = (1, 2, 3, 4, 5)
    split1: tuple = (6, 7, 8, 9, 10)


@dataclass
class PrototypeConfig:
    k: int = 5
    seed_space: str = "feature"
    spa_seed: int = 1


@dataclass
class TrainerConfig:
    iterations: int = 500
    lr_embedder: float = 1e-4
    lr_rest: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    way: int = 2
    shot: int = 1
    jitter: float = 0.01
    rotate: bool = True
    tau: float = 10.0
    variant: str = "full_bfg"
    train_split: str = "s0"
    checkpoint_every: int = 100
    prefetch: int = 0

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("trainer.iterations must be >= 1")
        if self.lr_embedder < 0 or self.lr_rest < 0:
            raise ConfigError("trainer learning rates must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"trainer.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.train_split not in ("s0", "s1"):
            raise ConfigError("trainer.train_split must be s0 or s1")
        if self.way < 1 or self.shot < 1:
            raise ConfigError("trainer.way and trainer.shot must be >= 1")
        if self.tau <= 0:
            raise ConfigError("trainer.tau must be > 0")


@dataclass
class EvalConfig:
    episodes: int = 100
    seed: int = 1000


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    prototype: PrototypeConfig = field(default_factory=PrototypeConfig)
    bfg: SimilarityConfig = field(default_factory=SimilarityConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        self.embedder.validate()
        self.bfg.validate()
        self.trainer.validate()
        s0, s1 = set(self.data.split0), set(self.data.split1)
        if not s0 or not s1 or s0 & s1:
            raise ConfigError("data.split0 and data.split1 must be nonempty and disjoint")
        if self.prototype.k < 1:
            raise ConfigError("prototype.k must be >= 1")
        if self.prototype.seed_space not in ("feature", "coord"):
            raise ConfigError("prototype.seed_space must be feature or coord")
        if self.data.block_points <= self.embedder.knn_k:
            raise ConfigError("data.block_points must exceed embedder.knn_k")
        if self.data.block_size <= 0:
            raise ConfigError("data.block_size must be > 0")
        if self.eval.episodes < 1:
            raise ConfigError("eval.episodes must be >= 1")
        return self


# the file spells SimilarityConfig.lam as "lambda"
_ALIASES = {("bfg", "lambda"): "lam"}
_REVERSE = {(s, f): k for (s, k), f in _ALIASES.items()}


def _sections(cfg):
    return [(f.name, getattr(cfg, f.name)) for f in dataclasses.fields(cfg)]


def iter_keys(cfg=None):
    """Yield (dotted key, default value) for every config key."""
    cfg = cfg or RunConfig()
    for sname, section in _sections(cfg):
        for f in dataclasses.fields(section):
            key = _REVERSE.get((sname, f.name), f.name)
            yield f"{sname}.{key}", getattr(section, f.name)


def format_value(v):
    if isinstance(v, tuple):
        v = list(v)
    if isinstance(v, str):
        return v
    return json.dumps(v)


def _coerce(key, default, raw):
    if isinstance(raw, str):
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
    else:
        value = raw
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                value = value.lower() in ("true", "yes", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            items = list(value) if isinstance(value, (list, tuple)) else [value]
            return tuple(int(v) for v in items)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key}: cannot interpret {raw!r}") from None
    return value


def set_key(cfg, key, raw):
    if "." not in key:
        raise ConfigError(f"unknown config key {key!r}")
    sname, fname = key.split(".", 1)
    section = getattr(cfg, sname, None)
    if section is None or not dataclasses.is_dataclass(section):
        raise ConfigError(f"unknown config key {key!r}")
    fname = _ALIASES.get((sname, fname), fname)
    names = {f.name for f in dataclasses.fields(section)}
    if fname not in names:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(section, fname, _coerce(key, getattr(section, fname), raw))


def parse_config_text(text, cfg=None):
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        set_key(cfg, key, raw)
    return cfg


def load_config(path=None, overrides=()):
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        parse_config_text(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), raw.strip())
    return cfg.validate()


def dump_config(cfg):
    return "".join(f"{k} = {format_value(v)}\n" for k, v in iter_keys(cfg))


def copy_config(cfg):
    return parse_config_text(dump_config(cfg))
