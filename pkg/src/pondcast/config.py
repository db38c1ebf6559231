"""Run configuration: one JSON document with embedded defaults and flag overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .gauges import DEFAULT_THRESHOLDS, DEFAULT_WEIGHTS
from .models.anomaly import DETECTOR_KINDS, LOOKBACK_HOURS, PERCENTILE, TRAINING_PRESETS
from .models.forecast import KINDS
from .training import LR_GRID

CONFIG_VERSION = 1
VARIANTS = ("proposed", "standard")


class ConfigError(ValueError):
    """Invalid configuration or unusable paths (exit code 2)."""


def default_scenario() -> dict:
    """Default three-pond farm with one DO crash and one biofouling episode in pond1."""
    return {
        "name": "paperlike",
        "sensors": 3,
        "days": 60,
        "start": "2020-01-01T00:00:00Z",
        "forecast_error_std": 1.0,
        "pond_jitter": 0.1,
        "missing_gaps_per_sensor": 2,
        "injections": [
            {"sensor": "pond1", "kind": "do_crash", "start": "2020-02-10T11:00:00Z"},
            {"sensor": "pond1", "kind": "biofouling", "start": "2020-02-20T00:00:00Z"},
        ],
        "pond": {},
    }


def default_train() -> dict:
    return {
        "lr": None,  # None: pick from lr_grid by a short search, then train in full
        "lr_grid": list(LR_GRID),
        "search_epochs": 2,
        "batch_size": 32,
        "max_epochs": 20,
        "patience": 5,
        "min_delta": 0.0,
        "val_fraction": 0.2,
        "train_stride": 8,
        "test_stride": 1,
    }


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "."
    data_dir: str = "data"
    model_dir: str = "models"
    report_dir: str = "reports"
    scenario: dict = field(default_factory=default_scenario)
    test_sensor: str = "pond1"
    target: str = "do"
    forecast_kinds: list = field(default_factory=lambda: list(KINDS))
    variants: list = field(default_factory=lambda: list(VARIANTS))
    gauge_variables: list = field(default_factory=lambda: list(DEFAULT_WEIGHTS))
    pipeline_kind: str = "forecastnet"
    detectors: list = field(default_factory=lambda: list(DETECTOR_KINDS))
    pipeline_detector: str = "transformer"
    detector_presets: dict = field(default_factory=lambda: copy.deepcopy(TRAINING_PRESETS))
    train: dict = field(default_factory=default_train)
    level: float = 0.7
    percentile: float = PERCENTILE
    lookback_hours: float = LOOKBACK_HOURS
    ticks: int = 24
    pipeline_start: str | None = None
    gauge_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    gauge_thresholds: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_THRESHOLDS.items()})

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < float(self.level) <= 1.0:
            raise ConfigError("level must be in (0, 1]")
        if int(self.ticks) < 0:
            raise ConfigError("ticks must be >= 0")
        if int(self.seed) < 0:
            raise ConfigError("seed must be a nonnegative integer")
        bad = [k for k in self.forecast_kinds if k not in KINDS]
        bad += [v for v in self.variants if v not in VARIANTS]
        bad += [d for d in self.detectors if d not in DETECTOR_KINDS]
        if self.pipeline_kind not in KINDS:
            bad.append(self.pipeline_kind)
        if self.pipeline_detector not in DETECTOR_KINDS:
            bad.append(self.pipeline_detector)
        if bad:
            raise ConfigError(f"unknown model names: {bad}")
        unknown = set(self.train) - set(default_train())
        if unknown:
            raise ConfigError(f"unknown train settings: {sorted(unknown)}")
        self.train = {**default_train(), **self.train}
        for kind, preset in self.detector_presets.items():
            if kind not in DETECTOR_KINDS or set(preset) - {"lr", "stride", "epochs"}:
                raise ConfigError(f"bad detector preset for {kind!r}")
        self.detector_presets = {k: {**TRAINING_PRESETS[k], **self.detector_presets.get(k, {})}
                                 for k in DETECTOR_KINDS}

    # paths
    def path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.out) / p

    @classmethod
    def load(cls, path=None, **overrides) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                with open(path) as fh:
                    doc = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
            doc.pop("schema_version", None)
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {"schema_version": CONFIG_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
