"""Flat key-value run configuration.

The on-disk format is plain text, one ``key = value`` per line, ``#``
comments, commas for lists. Every field has a typed default below; parsing
coerces to the default's type, so a config file only lists overrides.
``digest()`` hashes the canonical JSON form; checkpoints embed it and
refuse to load under a different runtime config.
"""

import dataclasses
import hashlib
import json

from .errors import ConfigError

BUDGET_GRID = (16, 32, 48, 64)
LOSS_TABLE = (0.0, 0.01, 0.02, 0.03, 0.05, 0.07, 0.09, 0.11, 0.14, 0.2, 0.3, 0.4)
SYNTH_KINDS = ("constant", "gradient", "checkerboard", "noise", "mandelbrot")


@dataclasses.dataclass
class Config:
    # data
    resolution: int = 32
    channels: int = 3
    data_source: str = "synthetic"  # synthetic | folder
    data_path: str = ""
    train_size: int = 512
    val_size: int = 256
    synth_weights: tuple = (2.0, 3.0, 3.0, 1.5, 2.5)  # per SYNTH_KINDS
    seed: int = 0

    # base tokenizer
    patch_size: int = 4
    d2: int = 16
    base_mode: str = "continuous"  # continuous | discrete
    k_base: int = 256
    base_epochs: int = 40
    base_lr: float = 0.003

    # 1D tokenizer
    d1: int = 64
    enc_width: int = 64
    enc_depth: int = 2
    dec_width: int = 64
    dec_depth: int = 3
    n_heads: int = 4
    mlp_ratio: int = 4
    t_max: int = 64
    budget_grid: tuple = BUDGET_GRID
    mode_1d: str = "discrete"  # discrete | continuous
    codebook_size: int = 512
    d_q: int = 12
    threshold: float = 0.75
    loss_table: tuple = LOSS_TABLE

    # training
    beta: float = 0.25
    lam: float = 1.0
    lr: float = 0.001
    batch_size: int = 16
    stage1_iters: int = 3000
    stage2_iters: int = 1200
    log_every: int = 10

    # output
    out_dir: str = "runs/main"

    def digest(self):
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(name, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = default[0] if default else 0.0
            cast = int if isinstance(elem, int) else float
            return tuple(cast(p) for p in parts)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name!r}: {raw!r} ({e})") from None


def parse_config(text):
    """Parse flat key = value text into a validated Config."""
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(Config, key) if not isinstance(
            _FIELDS[key].default, dataclasses._MISSING_TYPE
        ) else _FIELDS[key].default_factory()
        overrides[key] = _coerce(key, raw, default)
    cfg = dataclasses.replace(Config(), **overrides)
    validate(cfg)
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def from_json(blob):
    d = json.loads(blob)
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    cfg = Config(**d)
    validate(cfg)
    return cfg


def validate(cfg):
    if cfg.resolution % cfg.patch_size != 0:
        raise ConfigError(
            f"resolution {cfg.resolution} not divisible by patch_size {cfg.patch_size}"
        )
    if cfg.channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {cfg.channels}")
    if cfg.data_source not in ("synthetic", "folder"):
        raise ConfigError(f"unknown data_source {cfg.data_source!r}")
    if cfg.data_source == "folder" and not cfg.data_path:
        raise ConfigError("data_source=folder requires data_path")
    if cfg.base_mode not in ("continuous", "discrete"):
        raise ConfigError(f"unknown base_mode {cfg.base_mode!r}")
    if cfg.mode_1d not in ("discrete", "continuous"):
        raise ConfigError(f"unknown mode_1d {cfg.mode_1d!r}")
    grid = cfg.budget_grid
    if not grid or list(grid) != sorted(set(grid)) or grid[0] < 1:
        raise ConfigError(f"budget_grid must be ascending positive ints, got {grid}")
    if grid[-1] != cfg.t_max:
        raise ConfigError(f"budget_grid max {grid[-1]} must equal t_max {cfg.t_max}")
    lt = cfg.loss_table
    if not lt or lt[0] != 0.0 or list(lt) != sorted(set(lt)):
        raise ConfigError("loss_table must be strictly ascending and start at 0.0")
    if not 0.0 < cfg.threshold < 1.0:
        raise ConfigError(f"threshold must be in (0,1), got {cfg.threshold}")
    for w, name in ((cfg.enc_width, "enc_width"), (cfg.dec_width, "dec_width")):
        if w % cfg.n_heads != 0:
            raise ConfigError(f"{name} {w} not divisible by n_heads {cfg.n_heads}")
    if len(cfg.synth_weights) != len(SYNTH_KINDS):
        raise ConfigError(
            f"synth_weights needs {len(SYNTH_KINDS)} entries, got {len(cfg.synth_weights)}"
        )
    g = (cfg.resolution // cfg.patch_size) ** 2
    if cfg.t_max > g * cfg.d2:
        raise ConfigError(f"t_max {cfg.t_max} exceeds grid capacity {g * cfg.d2}")
    return cfg


def grid_tokens(cfg):
    """Number of base grid positions G for this config."""
    return (cfg.resolution // cfg.patch_size) ** 2


_BASE_FIELDS = (
    "resolution", "channels", "data_source", "data_path", "train_size",
    "synth_weights", "seed", "patch_size", "d2", "base_mode", "k_base",
    "base_epochs", "base_lr",
)


def base_digest(cfg):
    """Digest over the fields that determine the base tokenizer, so sweep
    configs differing only in 1D-model fields can share one base."""
    blob = json.dumps({k: getattr(cfg, k) for k in _BASE_FIELDS}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
