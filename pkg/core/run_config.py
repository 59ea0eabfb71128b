# file: core/run_config.py
"""Run configuration and seed derivation.

A config file is plain text with one dotted ``section.key=value`` per line;
``#`` starts a comment and list values are comma separated::

    seed=7
    frame.clip_len_s=2.5
    arch.lstm_units=40,30,20
    train.epochs=120
"""

import dataclasses
import enum
import hashlib
import logging
from dataclasses import dataclass, field

from .augment import AugmentConfig
from .dsp_features import FrameSpec
from .errors import ArgumentError
from .evaluation import ALL_TASKS, GRANULARITIES, NOISE_FRACTIONS, NOISE_SIGMA, PER_CLIP, TASK_FILTERS
from .model import ArchitectureSpec, TrainConfig

logger = logging.getLogger(__name__)

# --- Constants for configuration ---
BATCH_SIZE_BAND = (100, 170)
SECTIONS = ("frame", "augment", "arch", "train", "experiment")


def derive_seed(root, label, index=0):
    """Independent 63-bit seed for a named sub-pipeline (and item index) under ``root``."""
    digest = hashlib.sha256(f"{int(root)}:{label}:{int(index)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    sample_rate_hz: int = 16000
    eval_split: str = "val"
    granularity: str = PER_CLIP
    noise_fractions: tuple = NOISE_FRACTIONS
    noise_sigma: float = NOISE_SIGMA
    task_filter: str = ALL_TASKS
    gender_eval_splits: tuple = ("val", "test")

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ArgumentError(f"experiment.granularity must be one of {GRANULARITIES}")
        if self.task_filter not in TASK_FILTERS + (ALL_TASKS,):
            raise ArgumentError(f"experiment.task_filter must be one of {TASK_FILTERS + (ALL_TASKS,)}")
        if self.eval_split not in ("train", "val", "test"):
            raise ArgumentError("experiment.eval_split must be train, val or test")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    frame: FrameSpec = field(default_factory=FrameSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def train_config(self, label="train", index=0):
        return dataclasses.replace(self.train, seed=derive_seed(self.seed, label, index))

    def augment_config(self, index=0):
        return dataclasses.replace(self.augment, rng_seed=derive_seed(self.seed, "augment", index))

    def with_seed(self, seed):
        return dataclasses.replace(self, seed=int(seed))

    def check(self):
        lo, hi = BATCH_SIZE_BAND
        if not lo <= self.train.batch_size <= hi:
            logger.warning("train.batch_size=%d is outside the recommended %d..%d band",
                           self.train.batch_size, lo, hi)
        if self.arch.input_dim != self.frame.n_features:
            raise ArgumentError(f"arch.input_dim={self.arch.input_dim} but frame settings produce "
                                f"{self.frame.n_features} features")
        return self


def _coerce(raw, default, annotation, key):
    raw = raw.strip()
    try:
        if isinstance(default, bool) or annotation is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if raw.lower() == "none" and default is None:
            return None
        if isinstance(default, tuple) or annotation is tuple:
            elem = type(default[0]) if default else float
            return tuple(elem(v.strip()) for v in raw.split(",") if v.strip())
        if isinstance(annotation, type) and issubclass(annotation, enum.Enum):
            return annotation(raw)
        if annotation is int or isinstance(default, int):
            return int(raw)
        if annotation is float or isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ArgumentError(f"bad value {raw!r} for {key}") from None


def parse_run_config(text, base=None):
    base = base or RunConfig()
    sections = {name: {} for name in SECTIONS}
    top = {}
    for line_number, line in enumerate(str(text).splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {line_number}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections:
                raise ArgumentError(f"config line {line_number}: unknown section {section!r}")
            sections[section][name] = (value, line_number)
        elif key == "seed":
            top[key] = (value, line_number)
        else:
            raise ArgumentError(f"config line {line_number}: unknown key {key!r}")

    updates = {}
    if "seed" in top:
        updates["seed"] = _coerce(top["seed"][0], 0, int, "seed")
    for section, values in sections.items():
        if not values:
            continue
        current = getattr(base, section)
        fields = {f.name: f for f in dataclasses.fields(current)}
        changes = {}
        for name, (value, line_number) in values.items():
            if name not in fields:
                raise ArgumentError(f"config line {line_number}: unknown key {section}.{name}")
            changes[name] = _coerce(value, getattr(current, name), fields[name].type, f"{section}.{name}")
        updates[section] = dataclasses.replace(current, **changes)
    return dataclasses.replace(base, **updates).check()


def load_run_config(path=None):
    if path is None:
        return RunConfig().check()
    with open(path, "r", encoding="utf-8") as f:
        return parse_run_config(f.read())


def format_run_config(cfg):
    """Dotted key=value text that parse_run_config reads back to ``cfg``."""
    lines = [f"seed={cfg.seed}"]
    for section in SECTIONS:
        current = getattr(cfg, section)
        for f in dataclasses.fields(current):
            name, value = f.name, getattr(current, f.name)
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{section}.{name}={value}")
    return "\n".join(lines) + "\n"
