"""Decision-support gauges: pond state, overall state and anomaly level (0-100)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_NORM_MINUTES = 180.0
STEP_MINUTES = 15.0
DIRECTIONS = ("above_upper", "below_lower")
DEFAULT_WEIGHTS = {"do": 0.4, "ph": 0.2, "water_temp": 0.2, "chlorophyll": 0.2}
# Alarm thresholds per variable; extremes come from the data at hand.
DEFAULT_THRESHOLDS = {
    "do": (4.0, "below_lower"),
    "ph": (8.8, "above_upper"),
    "water_temp": (32.0, "above_upper"),
    "chlorophyll": (80.0, "above_upper"),
}


@dataclass(frozen=True)
class GaugeSpec:
    variable: str
    threshold: float
    direction: str
    v_ext: float  # most extreme value seen in the data, beyond the threshold
    t_norm: float = T_NORM_MINUTES

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.t_norm <= 0:
            raise ValueError("normalisation duration must be positive")
        beyond = self.v_ext > self.threshold if self.direction == "above_upper" else self.v_ext < self.threshold
        if not beyond:
            raise ValueError(f"{self.variable}: v_ext {self.v_ext} is not beyond threshold {self.threshold}")

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "above_upper" else -1.0


@dataclass(frozen=True)
class GaugeReading:
    value: float
    area: float = 0.0
    clamped: bool = False


def exceedance_area(values, threshold: float, sign: float = 1.0, step: float = STEP_MINUTES,
                    times=None) -> float:
    """Area (value x minutes) between a piecewise-linear curve and the threshold
    where ``sign * (curve - threshold) > 0``.

    Segments that cross the threshold are split at the exact crossing.
    ``times`` (minutes, nondecreasing) overrides the uniform ``step`` grid;
    a repeated time gives a vertical jump.
    """
    e = sign * (np.asarray(values, dtype=np.float64) - threshold)
    if times is None:
        dt = np.full(len(e) - 1, float(step))
    else:
        dt = np.diff(np.asarray(times, dtype=np.float64))
        if len(dt) != len(e) - 1 or (dt < 0).any():
            raise ValueError("times must be nondecreasing and match the values")
    if len(e) < 2:
        return 0.0
    a, b = e[:-1], e[1:]
    both = (a >= 0) & (b >= 0)
    area = np.where(both, 0.5 * (a + b) * dt, 0.0)
    cross = (a > 0) != (b > 0)
    cross &= ~both
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(cross, a / (a - b), 0.0)
    tri = np.where(a > 0, 0.5 * a * u * dt, 0.5 * b * (1.0 - u) * dt)
    area = area + np.where(cross, tri, 0.0)
    return float(area.sum())


def state_gauge(forecast, spec: GaugeSpec, step: float = STEP_MINUTES, times=None) -> GaugeReading:
    """``100 * min(1, A / (T_norm * |v_ext - threshold|))`` for a physical-unit forecast."""
    values = forecast if isinstance(forecast, (np.ndarray, list, tuple)) else forecast.mean
    area = exceedance_area(values, spec.threshold, spec.sign, step, times)
    full = spec.t_norm * abs(spec.v_ext - spec.threshold)
    ratio = area / full
    return GaugeReading(100.0 * min(1.0, ratio), area, ratio > 1.0)


def normalize_weights(weights) -> np.ndarray:
    w = np.asarray(list(weights), dtype=np.float64)
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must not all be zero")
    return w / total


def overall_gauge(readings, weights) -> GaugeReading:
    readings, weights = list(readings), list(weights)
    if len(readings) != len(weights):
        raise ValueError(f"{len(readings)} readings but {len(weights)} weights")
    w = normalize_weights(weights)
    values = np.array([getattr(r, "value", r) for r in readings], dtype=np.float64)
    return GaugeReading(float(np.clip(w @ values, 0.0, 100.0)))


def anomaly_level(mse: float, theta_max: float) -> GaugeReading:
    """Linear map of an MSE score onto 0-100; ``theta_max`` reads as 100."""
    if mse < 0:
        raise ValueError("mse must be nonnegative")
    if theta_max <= 0:
        raise ValueError("theta_max must be positive")
    ratio = mse / theta_max
    return GaugeReading(100.0 * min(1.0, ratio), clamped=ratio > 1.0)


def default_specs(extremes: dict, thresholds: dict = DEFAULT_THRESHOLDS) -> dict:
    """Gauge specs from ``{variable: (min, max)}`` observed over the fleet.

    When the data never pass a threshold, the extreme is placed one unit
    beyond it so the spec stays valid.
    """
    specs = {}
    for var, (thr, direction) in thresholds.items():
        lo, hi = extremes[var]
        if direction == "above_upper":
            v_ext = hi if hi > thr else thr + 1.0
        else:
            v_ext = lo if lo < thr else thr - 1.0
        specs[var] = GaugeSpec(var, thr, direction, float(v_ext))
    return specs


def gauge_report(pond: str, timestamp: str, forecasts: dict, specs: dict, weights: dict = DEFAULT_WEIGHTS,
                 anomaly_mse: float | None = None, theta_max: float | None = None) -> dict:
    """JSON-ready gauge summary for one pond at one pipeline tick."""
    gauges = {var: state_gauge(forecasts[var], specs[var]).value for var in specs if var in forecasts}
    names = [v for v in weights if v in gauges]
    overall = overall_gauge([gauges[v] for v in names], [weights[v] for v in names]).value if names else 0.0
    level = None
    if anomaly_mse is not None and theta_max is not None:
        level = anomaly_level(anomaly_mse, theta_max).value
    return {"pond": pond, "timestamp": timestamp, "gauges": gauges, "overall": overall, "anomaly_level": level}
