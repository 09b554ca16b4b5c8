"""Experiment configuration: strict TOML parsing, defaults, snapshots.

Every section maps onto a dataclass; unknown keys and wrongly typed values
are rejected with the offending ``section.key`` in the message. Students default to fewer
epochs than the teacher so a three-seed run stays within minutes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from dist_ssl.backend import ModelSpec, TrainSchedule
from dist_ssl.errors import ConfigError, DistError
from dist_ssl.sampling import AugmentParams, SamplingParams

OUT_DIR_ENV = "DIST_OUT_DIR"
STAGE2_TEACHERS = ("final", "best_labeled")


@dataclass(frozen=True)
class DataConfig:
    num_clips: int = 2000
    num_classes: int = 4
    frames_per_clip: int = 16
    frame_size: int = 32
    difficulty: float = 0.3
    generator_seed: int = 1
    dataset_path: str = ""
    labeled_fraction: float = 0.0625
    test_fraction: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "motion_cnn"
    width: int = 16


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 40
    batch_size: int = 16
    base_lr: float = 0.005
    lr_gamma: float = 0.9
    lr_step_every: int = 2
    momentum: float = 0.9
    weight_decay: float = 0.0

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(**dataclasses.asdict(self))


def _student_schedule() -> ScheduleConfig:
    return ScheduleConfig(epochs=12)


@dataclass(frozen=True)
class SSLConfig:
    target_frames: int = 8
    ablation: bool = False
    flush_last_window: bool = False
    stage2_warm_start: bool = False
    stage2_teacher: str = "final"
    labeled_share: float = 0.7  # 0 samples the mixed set as a plain union


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_deg: float = 15.0
    brightness_jitter: float = 0.3
    contrast_jitter: float = 0.3
    saturation_jitter: float = 0.5
    blur_kernel: int = 5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)

    def params(self) -> AugmentParams:
        return AugmentParams(**dataclasses.asdict(self))


@dataclass(frozen=True)
class TimelineConfig:
    window_s: float = 3.0
    overlap_s: float = 1.0
    fps: float = 0.0  # 0 means frames_per_clip / 3


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/dist"
    seeds: tuple[int, ...] = (0, 1, 2)
    log_level: str = "INFO"
    persist_frames: bool = False
    parallel: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: ScheduleConfig = field(default_factory=ScheduleConfig)
    student: ScheduleConfig = field(default_factory=_student_schedule)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    timeline: TimelineConfig = field(default_factory=TimelineConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def sampling(self) -> SamplingParams:
        return SamplingParams(self.ssl.target_frames)

    @property
    def aug(self) -> AugmentParams:
        return self.augment.params()

    @property
    def timeline_fps(self) -> float:
        return self.timeline.fps or self.data.frames_per_clip / 3.0

    def model_spec(self, init_seed: int = 0) -> ModelSpec:
        return ModelSpec(
            architecture=self.model.architecture,
            num_classes=self.data.num_classes,
            input_shape=(self.ssl.target_frames, self.data.frame_size, self.data.frame_size),
            init_seed=init_seed,
            width=self.model.width,
        )

    def with_seeds(self, seeds: list[int]) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seeds=tuple(seeds)))

    def with_out_dir(self, out_dir: str) -> "ExperimentConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, out_dir=str(out_dir)))


SECTIONS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, value, annotation):
    origin = typing.get_origin(annotation)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if origin is tuple:
        args = typing.get_args(annotation)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(key, v, args[0]) for v in value)
        if len(value) != len(args):
            raise ConfigError(key, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(key, v, a) for v, a in zip(value, args))
    raise ConfigError(key, f"unsupported field type {annotation!r}")


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    defaults = SECTIONS[name].default_factory()
    values = {k: _coerce(f"{name}.{k}", v, hints[k]) for k, v in raw.items()}
    return dataclasses.replace(defaults, **values)


def _validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if not 0.0 < d.labeled_fraction <= 1.0:
        raise ConfigError("data.labeled_fraction", f"must lie in (0, 1], got {d.labeled_fraction}")
    if not 0.0 <= d.test_fraction < 1.0:
        raise ConfigError("data.test_fraction", f"must lie in [0, 1), got {d.test_fraction}")
    if d.labeled_fraction < 1.0 and d.labeled_fraction + d.test_fraction >= 1.0:
        raise ConfigError("data.labeled_fraction", "labeled_fraction + test_fraction must be < 1")
    if not 0.0 <= d.difficulty <= 1.0:
        raise ConfigError("data.difficulty", "must lie in [0, 1]")
    for key in ("num_clips", "frames_per_clip", "frame_size"):
        if getattr(d, key) < 1:
            raise ConfigError(f"data.{key}", "must be positive")
    if d.num_classes < 2:
        raise ConfigError("data.num_classes", "need at least two classes")
    if cfg.ssl.stage2_teacher not in STAGE2_TEACHERS:
        raise ConfigError("ssl.stage2_teacher", f"must be one of {STAGE2_TEACHERS}")
    if not 0.0 <= cfg.ssl.labeled_share < 1.0:
        raise ConfigError("ssl.labeled_share", "must lie in [0, 1)")
    if not cfg.run.seeds:
        raise ConfigError("run.seeds", "need at least one seed")
    if cfg.timeline.fps < 0:
        raise ConfigError("timeline.fps", "must be >= 0")
    if not 0 <= cfg.timeline.overlap_s < cfg.timeline.window_s:
        raise ConfigError("timeline.overlap_s", "must lie in [0, window_s)")
    checks = {
        "teacher": cfg.teacher.schedule,
        "student": cfg.student.schedule,
        "augment": cfg.augment.params,
        "ssl": lambda: cfg.sampling,
        "model": lambda: cfg.model_spec(),
    }
    for section, build in checks.items():
        try:
            build()
        except DistError as exc:
            key = getattr(exc, "field", "")
            raise ConfigError(f"{section}.{key}" if key else section, str(exc)) from None


def parse_config(document: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(document)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<document>", f"malformed TOML: {exc}") from None
    sections = {}
    for name, value in raw.items():
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
        sections[name] = _build_section(name, typing.get_type_hints(ExperimentConfig)[name], value)
    cfg = ExperimentConfig(**sections)
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"no such config file: {path}")
    return parse_config(path.read_text())


def config_dict(cfg: ExperimentConfig) -> dict:
    def plain(value):
        if isinstance(value, tuple):
            return [plain(v) for v in value]
        return value

    return {
        name: {k: plain(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
        for name in SECTIONS
    }


def serialize_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_dict(cfg))


# keys that change where and how loudly a run happens, not what it computes
_NUISANCE = {"run": ("out_dir", "log_level", "parallel")}


def config_hash(cfg: ExperimentConfig) -> str:
    data = config_dict(cfg)
    for section, keys in _NUISANCE.items():
        for key in keys:
            data[section].pop(key, None)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def resolve_out_dir(flag: str | None, cfg: ExperimentConfig, environ: typing.Mapping[str, str] | None = None) -> str:
    """Output directory precedence: command-line flag, then environment, then config."""
    environ = os.environ if environ is None else environ
    if flag:
        return flag
    if environ.get(OUT_DIR_ENV):
        return environ[OUT_DIR_ENV]
    return cfg.run.out_dir
