"""Run configuration: environment defaults, ``[section] key = value`` files and ``--set`` overrides."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from .errors import ValidationError
from .models import BevGridSpec, PinholeCamera, Temperature

load_dotenv()

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "config.resolved.txt"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class SynthConfig:
    """Toy scene generator settings; the grid and camera are derived from the flat fields."""

    min_objects: int = 2
    max_objects: int = 4
    num_classes: int = 3
    origin_x: float = 0.0
    origin_y: float = -16.0
    cell_size: float = 1.0
    grid_height: int = 32
    grid_width: int = 32
    channels: int = 8
    image_height: int = 1
    image_width: int = 128
    fx: float = 64.0
    depth_bins: int = 128
    depth_min: float = 1.0
    depth_max: float = 33.0
    depth_floor: float = 0.05
    noise: float = 0.1
    points_per_object: int = 64
    teacher_channels: int = 8
    student_channels: int = 4

    @property
    def grid(self) -> BevGridSpec:
        return BevGridSpec(
            origin_x=self.origin_x,
            origin_y=self.origin_y,
            cell_size=self.cell_size,
            height=self.grid_height,
            width=self.grid_width,
            channels=self.channels,
        )

    @property
    def camera(self) -> PinholeCamera:
        return PinholeCamera(fx=self.fx, cx=self.image_width / 2.0, width=self.image_width)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.depth_min, self.depth_max, self.depth_bins + 1)


@dataclass
class IcdConfig:
    pool_size: int = 6
    include_positive: bool = False
    tau_init: float = 0.1


@dataclass
class ClfmConfig:
    channels: int = 8
    heads: int = 4
    epsilon: float = 1e-6
    feature_map: str = "elu_plus_one"
    scale: str = "heads"
    rope: str = "flat"
    depthwise: bool = False


@dataclass
class TrainConfig:
    steps: int = 500
    learning_rate: float = 0.05
    momentum: float = 0.9
    tau_lr_scale: float = 0.01
    tau_warmup_steps: int = 50
    lr_schedule: str = "cosine"
    grad_clip: float = 1.0
    batch_instances: int = 32
    train_scenes: int = 64
    log_every: int = 50
    ablate_pool_sizes: tuple[int, ...] = (3, 6, 9)


@dataclass
class BenchConfig:
    lengths: tuple[int, ...] = (1024, 4096, 16384, 65536)
    channels: int = 16
    heads: int = 4
    trials: int = 5
    warmup: int = 1
    quadratic_max_length: int = 16384
    parallel: bool = False
    fusion_grids: tuple[int, ...] = (16, 32)


@dataclass
class GradcheckConfig:
    cases: int = 20
    tolerance: float = 1e-4
    step: float = 1e-4


SECTIONS = {
    "synth": SynthConfig,
    "icd": IcdConfig,
    "clfm": ClfmConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
    "gradcheck": GradcheckConfig,
}


@dataclass
class RunConfig:
    """Everything a subcommand needs; top-level scalars fall back to ``BEVLAB_*`` variables."""

    seed: int = field(default_factory=lambda: int(os.getenv("BEVLAB_SEED", "0")))
    threads: int = field(default_factory=lambda: int(os.getenv("BEVLAB_THREADS", "4")))
    out_dir: Path = field(default_factory=lambda: Path(os.getenv("BEVLAB_OUT", "./runs")))
    log_level: str = field(default_factory=lambda: os.getenv("BEVLAB_LOG_LEVEL", "INFO"))
    json: bool = False

    synth: SynthConfig = field(default_factory=SynthConfig)
    icd: IcdConfig = field(default_factory=IcdConfig)
    clfm: ClfmConfig = field(default_factory=ClfmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def validate(self) -> None:
        s = self.synth
        checks = [
            (self.threads >= 1, f"threads must be >= 1, got {self.threads}"),
            (self.log_level.upper() in LOG_LEVELS, f"unknown log level {self.log_level!r}"),
            (0 <= s.min_objects <= s.max_objects, f"bad object range {s.min_objects}..{s.max_objects}"),
            (1 <= s.num_classes <= 3, f"num_classes must be 1..3, got {s.num_classes}"),
            (s.depth_min < s.depth_max, f"depth range {s.depth_min}..{s.depth_max} is empty"),
            (s.depth_bins >= 1 and s.image_width >= 1 and s.image_height >= 1, "image extents must be >= 1"),
            (0.0 <= s.depth_floor < 1.0, f"depth_floor must lie in [0, 1), got {s.depth_floor}"),
            (s.noise >= 0, f"noise must be >= 0, got {s.noise}"),
            (self.icd.pool_size >= 1, f"pool size must be >= 1, got {self.icd.pool_size}"),
            (
                Temperature.MIN_TAU <= self.icd.tau_init <= Temperature.MAX_TAU,
                f"tau_init must lie in [{Temperature.MIN_TAU}, {Temperature.MAX_TAU}]",
            ),
            (self.clfm.heads >= 1, f"heads must be >= 1, got {self.clfm.heads}"),
            (self.clfm.channels % self.clfm.heads == 0, "clfm channels must be divisible by heads"),
            (self.clfm.epsilon > 0, f"epsilon must be positive, got {self.clfm.epsilon}"),
            (self.train.learning_rate >= 0, "learning_rate must be >= 0"),
            (0.0 <= self.train.momentum < 1.0, f"momentum must lie in [0, 1), got {self.train.momentum}"),
            (self.train.grad_clip > 0, "grad_clip must be positive"),
            (self.train.tau_warmup_steps >= 0, "tau_warmup_steps must be >= 0"),
            (
                self.train.lr_schedule in LR_SCHEDULES,
                f"unknown lr_schedule {self.train.lr_schedule!r}, expected one of {LR_SCHEDULES}",
            ),
            (self.train.batch_instances >= 2, "batch_instances must be >= 2"),
            (self.train.train_scenes >= 1, "train_scenes must be >= 1"),
            (all(p >= 1 for p in self.train.ablate_pool_sizes), "ablation pool sizes must be >= 1"),
            (self.bench.trials >= 3, f"bench needs >= 3 trials, got {self.bench.trials}"),
            (self.bench.channels % self.bench.heads == 0, "bench channels must be divisible by heads"),
            (self.gradcheck.cases >= 1 and self.gradcheck.step > 0, "gradcheck needs cases >= 1, step > 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValidationError(message)
        self.synth.grid  # BevGridSpec validates its own extents

    def resolved_lines(self) -> list[str]:
        lines = [f"{name} = {_format(getattr(self, name))}" for name in _scalar_names(self)]
        for section in SECTIONS:
            lines.append("")
            lines.append(f"[{section}]")
            sub = getattr(self, section)
            lines.extend(f"{f.name} = {_format(getattr(sub, f.name))}" for f in fields(sub))
        return lines

    def write_resolved(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_CONFIG_NAME
        path.write_text("\n".join(self.resolved_lines()) + "\n")
        return path


def _scalar_names(cfg: RunConfig) -> list[str]:
    return [f.name for f in fields(cfg) if f.name not in SECTIONS]


def _format(value: object) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def coerce(raw: str, current: object, key: str) -> object:
    """Parse ``raw`` into the type of the value it replaces."""
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, Path):
            return Path(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else int
            return tuple(kind(part) for part in raw.split(",") if part.strip())
    except ValueError as e:
        raise ValidationError(f"cannot set {key} to {raw!r}: {e}") from e
    return raw


def apply_setting(cfg: RunConfig, key: str, raw: str) -> None:
    """Set ``section.key`` (or a top-level ``key``) from its text form."""
    section, _, name = key.strip().rpartition(".")
    if section:
        if section not in SECTIONS:
            raise ValidationError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
    else:
        target = cfg
        if name in SECTIONS:
            raise ValidationError(f"{name!r} is a section, set one of its keys instead")
    if name not in {f.name for f in fields(target)}:
        raise ValidationError(f"unknown config key {key!r}")
    setattr(target, name, coerce(raw, getattr(target, name), key))


def parse_config_text(cfg: RunConfig, text: str, source: str = "<config>") -> None:
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ValidationError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        apply_setting(cfg, f"{section}.{key}" if section else key, value)


def load_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` overrides, in that order."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file {path} does not exist")
        parse_config_text(cfg, path.read_text(), str(path))
        logger.debug("Loaded config from %s", path)
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        apply_setting(cfg, key, value)
    return cfg
