"""Run configuration, loaded from TOML. Defaults follow the full-scale search settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from bixnas.errors import ArtifactIOError, ConfigError
from bixnas.supernet import SuperNetConfig
from bixnas.tasks import TrainSchedule


@dataclass
class DataConfig:
    n: int = 64
    hw: int = 32
    val_frac: float = 0.2


@dataclass
class Phase1Settings:
    schedule: TrainSchedule = field(
        default_factory=lambda: TrainSchedule(epochs=300, lr=1e-3, decay="inverse_time", rate=3e-3, batch_size=2)
    )
    tau: float = 1.0


@dataclass
class Phase2Settings:
    samples: int = 15
    retain: int = 2
    reinit: bool = False
    schedule: TrainSchedule = field(
        default_factory=lambda: TrainSchedule(epochs=40, lr=1e-3, decay="step", factor=0.1, period=10, batch_size=2)
    )


@dataclass
class RunConfig:
    supernet: SuperNetConfig = field(default_factory=SuperNetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    phase1: Phase1Settings = field(default_factory=Phase1Settings)
    phase2: Phase2Settings = field(default_factory=Phase2Settings)
    retrain: TrainSchedule = field(
        default_factory=lambda: TrainSchedule(epochs=300, lr=1e-3, decay="inverse_time", rate=3e-3, batch_size=2)
    )
    seed: int = 0
    threads: int = 1

    def validate(self):
        if self.phase2.retain >= 3:
            raise ConfigError(f"phase2.retain must be < 3 (got {self.phase2.retain})")
        if self.phase2.retain < 1 or self.phase2.samples < 1:
            raise ConfigError("phase2.samples and phase2.retain must be >= 1")
        if self.phase1.tau <= 0:
            raise ConfigError("phase1.tau must be > 0")
        f = 2 ** (self.supernet.levels - 1)
        if self.data.hw % f:
            raise ConfigError(f"data.hw={self.data.hw} not divisible by 2^(L-1) = {f}")
        if self.data.n < 2 or not 0 < self.data.val_frac < 1:
            raise ConfigError("data.n must be >= 2 and 0 < data.val_frac < 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        try:
            cfg = cls(
                supernet=SuperNetConfig.from_dict(d.pop("supernet", {})),
                data=_build(DataConfig, d.pop("data", {})),
                phase1=_phase1(d.pop("phase1", {})),
                phase2=_phase2(d.pop("phase2", {})),
                retrain=_schedule(d.pop("retrain", {}), RunConfig().retrain),
                seed=int(d.pop("seed", 0)),
                threads=int(d.pop("threads", 1)),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        return cfg.validate()


def _build(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**d)


def _schedule(d, default: TrainSchedule) -> TrainSchedule:
    base = asdict(default)
    unknown = set(d) - set(base)
    if unknown:
        raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
    base.update(d)
    return TrainSchedule(**base)


def _phase1(d):
    d = dict(d)
    if "schedule" in d:
        d.update(d.pop("schedule"))
    tau = d.pop("tau", 1.0)
    return Phase1Settings(_schedule(d, Phase1Settings().schedule), tau)


def _phase2(d):
    d = dict(d)
    if "schedule" in d:
        d.update(d.pop("schedule"))
    keep = {k: d.pop(k) for k in ("samples", "retain", "reinit") if k in d}
    return Phase2Settings(schedule=_schedule(d, Phase2Settings().schedule), **keep)


def load_config(path) -> RunConfig:
    """Read a TOML run config; a JSON file written by a previous run also works."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read config {p}: {exc}") from exc
    try:
        raw = json.loads(text) if p.suffix == ".json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    return RunConfig.from_dict(raw)
