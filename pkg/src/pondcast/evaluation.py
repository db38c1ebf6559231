"""Forecast metrics and the per-model evaluation report."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .datapipe import Standardizer, WindowSet

REPORT_VERSION = 1
MAPE_FLOOR = 0.1  # physical units; keeps MAPE finite when DO nears zero


def mape(y, y_hat, floor: float = MAPE_FLOOR) -> float:
    """Mean absolute percentage error with the denominator floored at ``floor``."""
    return float(mape_rows(np.asarray(y)[None], np.asarray(y_hat)[None], floor)[0])


def rmse(y, y_hat) -> float:
    return float(rmse_rows(np.asarray(y)[None], np.asarray(y_hat)[None])[0])


def mape_rows(y: np.ndarray, y_hat: np.ndarray, floor: float = MAPE_FLOOR) -> np.ndarray:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return 100.0 * np.mean(np.abs(y - y_hat) / np.maximum(np.abs(y), floor), axis=-1)


def rmse_rows(y: np.ndarray, y_hat: np.ndarray) -> np.ndarray:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return np.sqrt(np.mean((y - y_hat) ** 2, axis=-1))


def seasonal_naive(history: np.ndarray, target_index: int = 0, out_len: int = 96) -> np.ndarray:
    """Repeat the last 24 h of the target."""
    return history[:, -out_len:, target_index].copy()


class SeasonalNaive:
    """Baseline with the model ``predict`` interface."""

    def __init__(self, target_index: int = 0, out_len: int = 96):
        self.target_index, self.out_len = target_index, out_len

    def predict(self, history, exo=None):
        from .models.forecast import ForecastOutput
        return ForecastOutput(seasonal_naive(np.asarray(history), self.target_index, self.out_len))


@dataclass
class EvalRow:
    mape: float
    mape_std: float
    rmse: float
    rmse_std: float
    runtime_s: float
    n_windows: int


@dataclass
class EvalReport:
    target: str
    rows: dict = field(default_factory=dict)  # model name -> EvalRow

    COLUMNS = ("MAPE", "MAPE std dev.", "RMSE", "RMSE std dev.", "run time (s)")

    def to_dict(self, include_runtime: bool = True) -> dict:
        rows = {}
        for name, r in self.rows.items():
            d = {"mape": r.mape, "mape_std": r.mape_std, "rmse": r.rmse, "rmse_std": r.rmse_std,
                 "n_windows": r.n_windows}
            if include_runtime:
                d["runtime_s"] = r.runtime_s
            rows[name] = d
        return {"schema_version": REPORT_VERSION, "target": self.target, "models": rows}

    def to_json(self, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True)

    def to_text(self) -> str:
        head = ["model", *self.COLUMNS]
        body = [[name, f"{r.mape:.3f}", f"{r.mape_std:.3f}", f"{r.rmse:.3f}", f"{r.rmse_std:.3f}",
                 f"{r.runtime_s:.3f}"] for name, r in self.rows.items()]
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                    for i, (c, w) in enumerate(zip(row, widths)))
        return "\n".join([fmt(head)] + [fmt(r) for r in body]) + "\n"


def evaluate(models: dict, test: WindowSet, standardizer: Standardizer, target: str = "do",
             floor: float = MAPE_FLOOR) -> EvalReport:
    """Score each model's de-standardized forecasts window by window."""
    if len(test) == 0:
        raise ValueError("empty test set")
    y = standardizer.invert(test.target, target)
    report = EvalReport(target)
    for name, model in models.items():
        t0 = time.perf_counter()
        out = model.predict(test.history, test.exo)
        runtime = time.perf_counter() - t0
        y_hat = standardizer.invert(out.mean, target)
        m, r = mape_rows(y, y_hat, floor), rmse_rows(y, y_hat)
        report.rows[name] = EvalRow(float(m.mean()), float(m.std()), float(r.mean()), float(r.std()),
                                    runtime, len(test))
    return report
