"""Experiment config: one flat TOML file per experiment."""
import dataclasses
import os
import re
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .anchors import AnchorSpec
from .dataio import SynthTaskSpec
from .stitching import MODES
from .training import SAMPLERS, STITCH_MODES, TrainConfig

SEED_ENV = "SNSTITCH_SEED"


class ConfigError(ValueError):
    def __init__(self, message, line=None, column=None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # anchors
    small_depth: int = 4
    small_width: int = 32
    small_heads: int = 4
    large_depth: int = 8
    large_width: int = 64
    large_heads: int = 8
    mlp_ratio: float = 4.0
    seq_len: int = 8
    patch_dim: int = 16
    num_classes: int = 10
    # data
    data: str = "synthetic"
    samples_per_class: int = 120
    noise_std: float = 1.0
    margin: float = 3.0
    val_fraction: float = 0.2
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    patch_size: int = 4
    # training
    pretrain_iterations: int = 600
    iterations: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_scale_anchors: float = 1.0
    weight_decay: float = 0.05
    sampler: str = "ros"
    stitch_layer_mode: str = "lora"
    lora_rank: int = 16
    lora_b_std: float = 0.02
    calib_samples: int = 100
    # stitch space and budget
    mode: str = "TWS"
    budget_step: object = "auto"
    count_crossing_flops: bool = True

    def __post_init__(self):
        choices = {"data": ("synthetic", "idx"), "sampler": SAMPLERS,
                   "stitch_layer_mode": STITCH_MODES, "mode": MODES}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {list(allowed)}, got {getattr(self, key)!r}")
        step = self.budget_step
        if step != "auto" and (isinstance(step, bool) or not isinstance(step, (int, float)) or step <= 0):
            raise ConfigError("budget_step must be a positive number or \"auto\"")
        if self.data == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("data = \"idx\" needs train_images and train_labels")
        try:
            self.small_spec()
            self.large_spec()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def small_spec(self):
        return AnchorSpec(self.small_depth, self.small_width, self.small_heads, self.mlp_ratio,
                          self.patch_dim, self.num_classes, self.seq_len)

    def large_spec(self):
        return AnchorSpec(self.large_depth, self.large_width, self.large_heads, self.mlp_ratio,
                          self.patch_dim, self.num_classes, self.seq_len)

    def task_spec(self):
        """Synthetic task parameters; checked only by commands that build data."""
        try:
            return self._task_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def _task_spec(self):
        return SynthTaskSpec(self.num_classes, self.samples_per_class, self.noise_std, self.margin,
                             self.seq_len, self.patch_dim, self.val_fraction)

    def train_config(self, iterations=None):
        return TrainConfig(
            iterations=self.iterations if iterations is None else iterations,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            lr_scale_anchors=self.lr_scale_anchors, weight_decay=self.weight_decay,
            sampler=self.sampler, stitch_layer_mode=self.stitch_layer_mode,
            lora_rank=self.lora_rank, lora_b_std=self.lora_b_std,
            calib_samples=self.calib_samples, seed=self.seed)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _key_line(text, key):
    m = re.search(rf"^\s*{re.escape(key)}\s*=", text, re.MULTILINE)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _coerce(key, value, text):
    default = _FIELDS[key].default
    line = _key_line(text, key)
    if key == "budget_step":
        return value
    expected = type(default)
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
        raise ConfigError(f"{key} must be of type {expected.__name__}, got {type(value).__name__}", line)
    return value


def parse_config(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        msg = re.sub(r"\s*\(at line \d+, column \d+\)$", "", str(exc))
        raise ConfigError(f"parse error: {msg}", getattr(exc, "lineno", None),
                          getattr(exc, "colno", None)) from None
    values = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", _key_line(text, key))
        if isinstance(value, dict):
            raise ConfigError(f"{key}: tables are not allowed, the config is flat", _key_line(text, key))
        values[key] = _coerce(key, value, text)
    return ExperimentConfig(**values)


def load_config(path=None, env=None):
    """Read ``path`` (defaults when ``None``) and apply the seed override from the environment."""
    env = os.environ if env is None else env
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    cfg = parse_config(text)
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg
