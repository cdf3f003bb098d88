"""Run configuration files: versioned JSON, strict keys, precise diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .denoiser import PRESETS, Denoiser, DenoiserConfig, SequenceSpec, preset
from .errors import ConfigError, UnidiffError
from .layout import ModalityLayout
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, make_schedule
from .trainer import TrainConfig
from .world import WorldConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 100
    plan: str = "linear"
    alpha_floor: float = 1e-9


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "toy"
    overrides: dict = field(default_factory=lambda: {"dtype": "float32"})
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    paths: dict = field(default_factory=dict)

    def layout(self) -> ModalityLayout:
        return self.world.layout()

    def sequence(self) -> SequenceSpec:
        return SequenceSpec(self.world.lengths, grids=((self.world.rows, self.world.cols), None))

    def make_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return make_schedule(s.plan, s.T, s.alpha_floor)

    def denoiser_config(self) -> DenoiserConfig:
        return preset(self.model.preset, **self.model.overrides)

    def build_denoiser(self) -> Denoiser:
        return Denoiser(self.denoiser_config(), self.layout(), self.sequence(), self.schedule.T, seed=self.model.seed)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "world": self.world.to_dict(),
                "layout": {"sizes": list(self.layout().sizes), "lengths": list(self.world.lengths)},
                "schedule": asdict(self.schedule), "model": asdict(self.model), "train": self.train.to_dict(),
                "sampler": self.sampler.to_dict(), "paths": dict(self.paths)}


def _section(cls, raw, where: str, convert=None):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}; allowed: {sorted(known)}")
    if convert:
        raw = convert(raw)
    try:
        return cls(**raw)
    except UnidiffError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _world(raw):
    return {k: tuple(v) if k in ("shapes", "colors") else v for k, v in raw.items()}


def parse_run_config(raw: dict, where: str = "config") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: top level must be an object")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{where}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION})")
    allowed = {"schema_version", "world", "layout", "schedule", "model", "train", "sampler", "paths"}
    extra = sorted(set(raw) - allowed)
    if extra:
        raise ConfigError(f"{where}: unknown section(s) {extra}")
    run = RunConfig(
        world=_section(WorldConfig, raw.get("world"), f"{where}.world", _world),
        schedule=_section(ScheduleConfig, raw.get("schedule"), f"{where}.schedule"),
        model=_section(ModelConfig, raw.get("model"), f"{where}.model"),
        train=_section(TrainConfig, raw.get("train"), f"{where}.train"),
        sampler=_section(SamplerConfig, raw.get("sampler"), f"{where}.sampler"),
        paths=dict(raw.get("paths") or {}),
    )
    if run.model.preset not in PRESETS:
        raise ConfigError(f"{where}.model.preset: unknown preset {run.model.preset!r}; choose from {sorted(PRESETS)}")
    try:
        run.denoiser_config()
        run.make_schedule()
    except TypeError as exc:
        raise ConfigError(f"{where}.model.overrides: {exc}") from None
    except UnidiffError as exc:
        raise ConfigError(f"{where}.schedule: {exc}") from None
    declared = raw.get("layout")
    if declared is not None:
        want = {"sizes": list(run.layout().sizes), "lengths": list(run.world.lengths)}
        for key in ("sizes", "lengths"):
            if key in declared and list(declared[key]) != want[key]:
                raise ConfigError(f"{where}.layout.{key}: {declared[key]} disagrees with the world, "
                                  f"which implies {want[key]}")
    return run


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_run_config(raw, where=str(path))


def load_world_config(path) -> WorldConfig:
    """A bare world object (rows, cols, shades, caption_len, shapes, colors) from JSON."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read world config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return _section(WorldConfig, raw, str(path), _world)


def save_run_config(run: RunConfig, path):
    Path(path).write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
