"""Run configuration: INI-style `key = value` files with strict validation.

Unknown sections or keys are rejected outright so typos never silently
fall back to defaults. The evaluation interval n is auto-derived when
omitted: total_iterations / (2W) / module_count / 1.75, which spreads the
evaluation budget over every module with room for bootstrapping,
smoothing delay, and the halved refreeze windows.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from glacier.nn import LrSchedule
from glacier.plasticity import ControllerParams


class ConfigError(Exception):
    """Invalid or missing run configuration."""


@dataclass
class ModelConfig:
    arch: str = "toy_cnn"  # "toy_cnn" | "mlp"
    conv_channels: tuple[int, ...] = (8, 16)
    hidden: int = 64
    batchnorm: bool = False
    input_shape: tuple[int, ...] = (1, 8, 8)
    groups: tuple[str, ...] = ()  # regex per module, in order; empty = arch default


@dataclass
class DatasetConfig:
    kind: str = "blobs"  # "blobs" | "spirals" | "idx"
    classes: int = 4
    per_class: int = 1000
    dim: int = 64
    noise: float = 0.15
    val_per_class: int = 250
    images: str = ""  # idx only
    labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    flip_p: float = 0.0
    pad_crop: int = 0


@dataclass
class CacheConfig:
    enabled: bool = True
    dir: str = ""  # default: <out_dir>/cache
    threshold: float = 0.10
    prefetch_depth: int = 2
    disk_limit_bytes: int = 0  # 0 = unlimited
    resident_batches: int = 5


@dataclass
class ReferenceConfig:
    precision: str = "int8"  # "int8" | "float32"
    update_every_evals: int = 0  # 0 = use W


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    epochs: int = 30
    batch_size: int = 32
    lr: LrSchedule = field(default_factory=LrSchedule)
    controller: ControllerParams = field(default_factory=lambda: ControllerParams(n=1, w=10))
    n_auto: bool = True  # n was not given explicitly
    cache: CacheConfig = field(default_factory=CacheConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    workers: int = 1
    seed: int = 0
    out_dir: str = "runs/out"
    freezing_enabled: bool = True
    queue_capacity: int = 8
    pairing_horizon_evals: int = 4
    decision_delay_iters: int = 0  # 0 = auto: max(n, 25)
    controller_stall_s: float = 0.0  # test hook for the non-blocking contract
    cpu_load_gate: float = 0.0  # 0 disables the gate

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dataset.kind not in ("blobs", "spirals", "idx"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.reference.precision not in ("int8", "float32"):
            raise ConfigError(f"unknown reference precision {self.reference.precision!r}")
        if self.model.arch not in ("toy_cnn", "mlp"):
            raise ConfigError(f"unknown model arch {self.model.arch!r}")


def auto_eval_interval(total_iterations: int, w: int, module_count: int) -> int:
    """n ~ total / (2W) / modules / 1.75, never below 1."""
    return max(1, round(total_iterations / (2 * w) / module_count / 1.75))


def config_hash(cfg: TrainConfig) -> bytes:
    """Stable digest of the run configuration (checkpoint compatibility)."""
    return hashlib.sha256(repr(cfg).encode()).digest()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(raw: str, key: str) -> bool:
    try:
        return _BOOLS[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"key '{key}' wants a boolean, got {raw!r}") from None


def _parse_int(raw: str, key: str, minimum: int | None = None) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"key '{key}' wants an integer, got {raw!r}") from None
    if minimum is not None and value < minimum:
        raise ConfigError(f"key '{key}' must be >= {minimum}, got {value}")
    return value


def _parse_float(raw: str, key: str, positive: bool = False) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"key '{key}' wants a number, got {raw!r}") from None
    if positive and value <= 0:
        raise ConfigError(f"key '{key}' must be positive, got {value}")
    return value


def _parse_ints(raw: str, key: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(_parse_int(part.strip(), key) for part in raw.split(","))


_SECTION_KEYS = {
    "model": {"arch", "conv_channels", "hidden", "batchnorm", "input_shape", "groups"},
    "dataset": {
        "kind", "classes", "per_class", "dim", "noise", "val_per_class",
        "images", "labels", "val_images", "val_labels", "flip_p", "pad_crop",
    },
    "train": {
        "epochs", "batch_size", "base_lr", "lr_decay_factor", "lr_milestones",
        "lr_schedule", "workers", "seed", "out_dir", "freezing",
    },
    "controller": {
        "n", "w", "t_coeff", "bootstrap_rate", "lr_unfreeze_factor",
        "pairing_horizon_evals", "queue_capacity", "stall_seconds", "cpu_load_gate",
        "decision_delay",
    },
    "cache": {
        "enabled", "dir", "threshold", "prefetch_depth", "disk_limit_bytes",
        "resident_batches",
    },
    "reference": {"precision", "update_every_evals"},
}


def parse_config(path: str) -> TrainConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")

    cfg = TrainConfig()

    def get(section, key, default=None):
        if parser.has_option(section, key):
            return parser.get(section, key)
        return default

    # [model]
    if (v := get("model", "arch")) is not None:
        cfg.model.arch = v.strip()
    if (v := get("model", "conv_channels")) is not None:
        cfg.model.conv_channels = _parse_ints(v, "conv_channels")
    if (v := get("model", "hidden")) is not None:
        cfg.model.hidden = _parse_int(v, "hidden", 1)
    if (v := get("model", "batchnorm")) is not None:
        cfg.model.batchnorm = _parse_bool(v, "batchnorm")
    if (v := get("model", "input_shape")) is not None:
        cfg.model.input_shape = _parse_ints(v, "input_shape")
    if (v := get("model", "groups")) is not None:
        cfg.model.groups = tuple(line.strip() for line in v.splitlines() if line.strip())

    # [dataset]
    if (v := get("dataset", "kind")) is not None:
        cfg.dataset.kind = v.strip()
    if (v := get("dataset", "classes")) is not None:
        cfg.dataset.classes = _parse_int(v, "classes", 2)
    if (v := get("dataset", "per_class")) is not None:
        cfg.dataset.per_class = _parse_int(v, "per_class", 1)
    if (v := get("dataset", "dim")) is not None:
        cfg.dataset.dim = _parse_int(v, "dim", 1)
    if (v := get("dataset", "noise")) is not None:
        cfg.dataset.noise = _parse_float(v, "noise")
    if (v := get("dataset", "val_per_class")) is not None:
        cfg.dataset.val_per_class = _parse_int(v, "val_per_class", 0)
    for key in ("images", "labels", "val_images", "val_labels"):
        if (v := get("dataset", key)) is not None:
            setattr(cfg.dataset, key, v.strip())
    if (v := get("dataset", "flip_p")) is not None:
        cfg.dataset.flip_p = _parse_float(v, "flip_p")
    if (v := get("dataset", "pad_crop")) is not None:
        cfg.dataset.pad_crop = _parse_int(v, "pad_crop", 0)

    # [train]
    if (v := get("train", "epochs")) is not None:
        cfg.epochs = _parse_int(v, "epochs", 0)
    if (v := get("train", "batch_size")) is not None:
        cfg.batch_size = _parse_int(v, "batch_size", 1)
    kind = (get("train", "lr_schedule") or "step_decay").strip()
    base_lr = _parse_float(get("train", "base_lr", "0.1"), "base_lr", positive=True)
    decay = _parse_float(get("train", "lr_decay_factor", "0.1"), "lr_decay_factor")
    milestones = _parse_ints(get("train", "lr_milestones", ""), "lr_milestones")
    try:
        cfg.lr = LrSchedule(kind, base_lr, decay, milestones)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if (v := get("train", "workers")) is not None:
        cfg.workers = _parse_int(v, "workers", 1)
    if (v := get("train", "seed")) is not None:
        cfg.seed = _parse_int(v, "seed")
    if (v := get("train", "out_dir")) is not None:
        cfg.out_dir = v.strip()
    if (v := get("train", "freezing")) is not None:
        cfg.freezing_enabled = _parse_bool(v, "freezing")

    # [controller]
    n = 0
    if (v := get("controller", "n")) is not None:
        n = _parse_int(v, "n", 1)
    w = _parse_int(get("controller", "w", "10"), "w", 1)
    t_coeff = _parse_float(get("controller", "t_coeff", "0.2"), "t_coeff", positive=True)
    rate = _parse_float(get("controller", "bootstrap_rate", "0.10"), "bootstrap_rate", positive=True)
    factor = _parse_float(get("controller", "lr_unfreeze_factor", "10"), "lr_unfreeze_factor",
                          positive=True)
    try:
        cfg.controller = ControllerParams(
            n=n or 1, w=w, t_coeff=t_coeff, bootstrap_rate=rate, lr_unfreeze_factor=factor
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None
    cfg.n_auto = n == 0
    if (v := get("controller", "pairing_horizon_evals")) is not None:
        cfg.pairing_horizon_evals = _parse_int(v, "pairing_horizon_evals", 1)
    if (v := get("controller", "queue_capacity")) is not None:
        cfg.queue_capacity = _parse_int(v, "queue_capacity", 1)
    if (v := get("controller", "decision_delay")) is not None:
        cfg.decision_delay_iters = _parse_int(v, "decision_delay", 1)
    if (v := get("controller", "stall_seconds")) is not None:
        cfg.controller_stall_s = _parse_float(v, "stall_seconds")
    if (v := get("controller", "cpu_load_gate")) is not None:
        cfg.cpu_load_gate = _parse_float(v, "cpu_load_gate")

    # [cache]
    if (v := get("cache", "enabled")) is not None:
        cfg.cache.enabled = _parse_bool(v, "enabled")
    if (v := get("cache", "dir")) is not None:
        cfg.cache.dir = v.strip()
    if (v := get("cache", "threshold")) is not None:
        cfg.cache.threshold = _parse_float(v, "threshold")
    if (v := get("cache", "prefetch_depth")) is not None:
        cfg.cache.prefetch_depth = _parse_int(v, "prefetch_depth", 0)
    if (v := get("cache", "disk_limit_bytes")) is not None:
        cfg.cache.disk_limit_bytes = _parse_int(v, "disk_limit_bytes", 0)
    if (v := get("cache", "resident_batches")) is not None:
        cfg.cache.resident_batches = _parse_int(v, "resident_batches", 1)

    # [reference]
    if (v := get("reference", "precision")) is not None:
        cfg.reference.precision = v.strip()
    if (v := get("reference", "update_every_evals")) is not None:
        cfg.reference.update_every_evals = _parse_int(v, "update_every_evals", 0)

    cfg.validate()
    return cfg
