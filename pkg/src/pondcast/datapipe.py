"""Sensor ingestion, imputation, standardisation, windowing and splits.

Series live on a 15-minute UTC grid with NaN as the missing marker.  The
forecast models see 48 h (192 samples) of five history variables, a 24 h
(96 sample) air-temperature forecast, and predict 96 samples of one target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

STEP = np.timedelta64(15, "m")
HOUR = np.timedelta64(1, "h")
HISTORY_VARIABLES = ("do", "ph", "chlorophyll", "water_temp", "air_temp")
FORECAST_VARIABLE = "air_temp_forecast"
VARIABLES = HISTORY_VARIABLES + (FORECAST_VARIABLE,)
UNITS = {"do": "mg/L", "ph": "pH", "chlorophyll": "ug/L", "water_temp": "degC",
         "air_temp": "degC", FORECAST_VARIABLE: "degC"}
IN_LEN = 192
OUT_LEN = 96
MAX_IMPUTE_GAP = 8
SENSOR_HEADER = ["timestamp", "sensor_id", "variable", "value"]
FORECAST_HEADER = ["issued_at", "valid_at", FORECAST_VARIABLE]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# -- time helpers ------------------------------------------------------------

def parse_time(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def format_time(t: np.datetime64) -> str:
    return str(np.datetime64(t, "s")) + "Z"


def on_grid(t: np.datetime64) -> bool:
    return (t.astype("datetime64[s]").astype(np.int64) % (15 * 60)) == 0


# -- series ------------------------------------------------------------------

@dataclass
class TimeSeries:
    """One variable from one sensor on the 15-minute grid (NaN = missing)."""

    sensor_id: str
    variable: str
    start: np.datetime64
    values: np.ndarray

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise DataError(f"unknown variable {self.variable!r}")
        self.start = np.datetime64(self.start, "s")
        if not on_grid(self.start):
            raise DataError("off-grid timestamp")
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def times(self) -> np.ndarray:
        return self.start + np.arange(len(self.values)) * STEP

    @property
    def end(self) -> np.datetime64:
        return self.start + (len(self.values) - 1) * STEP


def load_csv(path) -> dict[tuple[str, str], TimeSeries]:
    """Read the sensor CSV into one series per (sensor, variable)."""
    rows: dict[tuple[str, str], dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SENSOR_HEADER:
            raise DataError(f"bad header {header!r}, expected {SENSOR_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataError(f"row {lineno}: expected 4 fields, got {len(row)}")
            stamp, sensor, variable, value = row
            try:
                t = parse_time(stamp)
            except ValueError as exc:
                raise DataError(f"row {lineno}: malformed timestamp {stamp!r}") from exc
            if not on_grid(t):
                raise DataError(f"row {lineno}: off-grid timestamp {stamp!r}")
            if variable not in VARIABLES or variable == FORECAST_VARIABLE:
                raise DataError(f"row {lineno}: unknown variable {variable!r}")
            try:
                v = float(value) if value.strip() else np.nan
            except ValueError as exc:
                raise DataError(f"row {lineno}: bad value {value!r}") from exc
            cell = rows.setdefault((sensor, variable), {})
            if t in cell:
                raise DataError(f"row {lineno}: duplicate timestamp {stamp!r} for {sensor}/{variable}")
            cell[t] = v
    out = {}
    for key, cell in rows.items():
        times = np.array(sorted(cell), dtype="datetime64[s]")
        idx = ((times - times[0]) // STEP).astype(int)
        values = np.full(idx[-1] + 1, np.nan)
        values[idx] = [cell[t] for t in times]
        out[key] = TimeSeries(key[0], key[1], times[0], values)
    return out


def write_csv(series: list[TimeSeries], path) -> None:
    """Write series in the sensor CSV schema, time-major, stable order."""
    records = []
    for s in series:
        for t, v in zip(s.times, s.values):
            records.append((t, s.sensor_id, s.variable, "" if np.isnan(v) else f"{v:.6f}"))
    records.sort(key=lambda r: (r[0], r[1], VARIABLES.index(r[2])))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SENSOR_HEADER)
        for t, sensor, variable, value in records:
            w.writerow([format_time(t), sensor, variable, value])


# -- imputation --------------------------------------------------------------

def impute_values(values: np.ndarray, max_gap: int = MAX_IMPUTE_GAP) -> np.ndarray:
    """Linearly fill interior NaN runs of length <= ``max_gap``.

    Longer runs and leading/trailing runs stay NaN.  Observed values are
    returned unchanged.
    """
    out = np.array(values, dtype=np.float64)
    missing = np.isnan(out)
    if not missing.any():
        return out
    observed = np.flatnonzero(~missing)
    if observed.size == 0:
        return out
    for left, right in zip(observed[:-1], observed[1:]):
        gap = right - left - 1
        if 0 < gap <= max_gap:
            frac = np.arange(1, gap + 1) / (gap + 1)
            out[left + 1:right] = out[left] + frac * (out[right] - out[left])
    return out


def valid_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of maximal True runs."""
    padded = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def impute(series: TimeSeries, max_gap: int = MAX_IMPUTE_GAP) -> list[TimeSeries]:
    """Fill short gaps and split the series at long ones."""
    filled = impute_values(series.values, max_gap)
    return [TimeSeries(series.sensor_id, series.variable, series.start + a * STEP, filled[a:b])
            for a, b in valid_runs(~np.isnan(filled))]


# -- sensor frames -----------------------------------------------------------

@dataclass
class SensorFrame:
    """All history variables of one sensor on a shared grid, shape (L, V)."""

    sensor_id: str
    start: np.datetime64
    data: np.ndarray
    variables: tuple = HISTORY_VARIABLES
    exo: np.ndarray | None = None  # (L, OUT_LEN) forecast issued at each step, or None

    @property
    def times(self) -> np.ndarray:
        return self.start + np.arange(len(self.data)) * STEP

    def index_of(self, t: np.datetime64) -> int:
        return int((np.datetime64(t, "s") - self.start) // STEP)


def build_frames(series: dict[tuple[str, str], TimeSeries],
                 variables: tuple = HISTORY_VARIABLES) -> dict[str, SensorFrame]:
    """Align each sensor's variables onto one grid (union span, NaN padded)."""
    sensors = sorted({k[0] for k in series})
    frames = {}
    for sensor in sensors:
        parts = []
        for v in variables:
            if (sensor, v) not in series:
                raise DataError(f"sensor {sensor!r} lacks variable {v!r}")
            parts.append(series[(sensor, v)])
        start = min(p.start for p in parts)
        end = max(p.end for p in parts)
        n = int((end - start) // STEP) + 1
        data = np.full((n, len(variables)), np.nan)
        for j, p in enumerate(parts):
            off = int((p.start - start) // STEP)
            data[off:off + len(p), j] = p.values
        frames[sensor] = SensorFrame(sensor, start, data, tuple(variables))
    return frames


def impute_frame(frame: SensorFrame, max_gap: int = MAX_IMPUTE_GAP) -> SensorFrame:
    data = np.column_stack([impute_values(frame.data[:, j], max_gap) for j in range(frame.data.shape[1])])
    return SensorFrame(frame.sensor_id, frame.start, data, frame.variables, frame.exo)


def apply_exclusions(frame: SensorFrame, exclusions) -> SensorFrame:
    """Blank out excluded intervals; ``exclusions`` holds (sensor or None, start, end)."""
    data = frame.data.copy()
    times = frame.times
    for sensor, start, end in exclusions:
        if sensor is not None and sensor != frame.sensor_id:
            continue
        hit = (times >= np.datetime64(start, "s")) & (times <= np.datetime64(end, "s"))
        data[hit] = np.nan
    return SensorFrame(frame.sensor_id, frame.start, data, frame.variables, frame.exo)


# -- standardisation ---------------------------------------------------------

@dataclass
class Standardizer:
    """Per-variable mean and population standard deviation."""

    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, frames, variables: tuple = HISTORY_VARIABLES) -> "Standardizer":
        frames = list(frames)
        st = cls()
        for j, v in enumerate(variables):
            col = np.concatenate([f.data[:, j] for f in frames])
            col = col[~np.isnan(col)]
            if col.size == 0:
                raise DataError(f"no training data for {v!r}")
            sd = float(col.std())
            if not sd > 0.0:
                raise DataError(f"degenerate variable {v!r}")
            st.mean[v] = float(col.mean())
            st.std[v] = sd
        if "air_temp" in st.mean:
            st.mean[FORECAST_VARIABLE] = st.mean["air_temp"]
            st.std[FORECAST_VARIABLE] = st.std["air_temp"]
        return st

    def apply(self, values, variable: str) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean[variable]) / self.std[variable]

    def invert(self, values, variable: str) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std[variable] + self.mean[variable]

    def apply_frame(self, frame: SensorFrame) -> SensorFrame:
        data = np.column_stack([self.apply(frame.data[:, j], v) for j, v in enumerate(frame.variables)])
        exo = None if frame.exo is None else self.apply(frame.exo, FORECAST_VARIABLE)
        return SensorFrame(frame.sensor_id, frame.start, data, frame.variables, exo)

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(dict(d["mean"]), dict(d["std"]))


def standardize_fit(train_frames, variables: tuple = HISTORY_VARIABLES) -> Standardizer:
    return Standardizer.fit(train_frames, variables)


def standardize_apply(st: Standardizer, values, variable: str) -> np.ndarray:
    return st.apply(values, variable)


def standardize_invert(st: Standardizer, values, variable: str) -> np.ndarray:
    return st.invert(values, variable)


# -- exogenous forecasts -----------------------------------------------------

def resample_forecast(hourly: np.ndarray, min_hours: int = 24) -> np.ndarray:
    """Linearly interpolate hourly forecast values onto the 15-minute grid."""
    hourly = np.asarray(hourly, dtype=np.float64)
    hours = len(hourly) - 1
    if hours < min_hours:
        raise DataError(f"forecast horizon {hours} h shorter than {min_hours} h")
    fine = np.arange(4 * hours + 1) / 4.0
    return np.interp(fine, np.arange(hours + 1), hourly)


@dataclass
class ForecastArchive:
    """Hourly-issued air-temperature forecasts, ``values[i, lead_hour]``."""

    issued: np.ndarray  # datetime64[s], sorted
    values: np.ndarray  # (n_issues, n_leads)

    def exo_for(self, t: np.datetime64, max_age: np.timedelta64 = np.timedelta64(3, "h")):
        """15-min forecast for the 96 steps after ``t`` from the latest issue at or before ``t``.

        Steps past the issue's horizon (at most three when issues are hourly)
        hold the final forecast value.  Returns None when no recent issue exists.
        """
        t = np.datetime64(t, "s")
        i = int(np.searchsorted(self.issued, t, side="right")) - 1
        if i < 0 or t - self.issued[i] > max_age:
            return None
        fine = resample_forecast(self.values[i])
        offset = int((t - self.issued[i]) // STEP)
        idx = np.minimum(offset + np.arange(1, OUT_LEN + 1), len(fine) - 1)
        return fine[idx]

    def exo_matrix(self, frame: SensorFrame) -> np.ndarray:
        out = np.full((len(frame.data), OUT_LEN), np.nan)
        for k, t in enumerate(frame.times):
            row = self.exo_for(t)
            if row is not None:
                out[k] = row
        return out


def load_forecast_csv(path) -> ForecastArchive:
    issues: dict[np.datetime64, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FORECAST_HEADER:
            raise DataError(f"bad header {header!r}, expected {FORECAST_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"row {lineno}: expected 3 fields")
            try:
                issued, valid = parse_time(row[0]), parse_time(row[1])
                value = float(row[2])
            except ValueError as exc:
                raise DataError(f"row {lineno}: {exc}") from exc
            lead = (valid - issued) / HOUR
            if lead != int(lead) or lead < 0:
                raise DataError(f"row {lineno}: valid_at not on the hourly grid of its issue")
            cell = issues.setdefault(issued, {})
            if int(lead) in cell:
                raise DataError(f"row {lineno}: duplicate forecast row")
            cell[int(lead)] = value
    if not issues:
        raise DataError("empty forecast file")
    stamps = sorted(issues)
    n_leads = max(max(c) for c in issues.values()) + 1
    values = np.full((len(stamps), n_leads), np.nan)
    for i, s in enumerate(stamps):
        for lead, v in issues[s].items():
            values[i, lead] = v
    if np.isnan(values).any():
        raise DataError("forecast issues have ragged horizons")
    return ForecastArchive(np.array(stamps, dtype="datetime64[s]"), values)


def write_forecast_csv(archive: ForecastArchive, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_HEADER)
        for t, row in zip(archive.issued, archive.values):
            for lead, v in enumerate(row):
                w.writerow([format_time(t), format_time(t + lead * HOUR), f"{v:.6f}"])


# -- windowing ---------------------------------------------------------------

@dataclass
class WindowPair:
    history: np.ndarray  # (in_len, V)
    exo: np.ndarray | None  # (out_len,)
    target: np.ndarray  # (out_len,)
    sensor_id: str
    end_time: np.datetime64  # time of the last history sample


@dataclass
class WindowSet:
    """Stacked window pairs; indexing yields :class:`WindowPair`."""

    history: np.ndarray  # (N, in_len, V)
    exo: np.ndarray | None  # (N, out_len)
    target: np.ndarray  # (N, out_len)
    sensor: np.ndarray  # (N,) str
    end_time: np.ndarray  # (N,) datetime64[s]
    target_index: int = 0

    def __len__(self) -> int:
        return len(self.target)

    def __getitem__(self, i) -> WindowPair:
        return WindowPair(self.history[i], None if self.exo is None else self.exo[i],
                          self.target[i], str(self.sensor[i]), self.end_time[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.history[idx], None if self.exo is None else self.exo[idx],
                         self.target[idx], self.sensor[idx], self.end_time[idx], self.target_index)

    @classmethod
    def concat(cls, sets: list["WindowSet"]) -> "WindowSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            raise DataError("no windows to concatenate")
        exo = None if any(s.exo is None for s in sets) else np.concatenate([s.exo for s in sets])
        return cls(np.concatenate([s.history for s in sets]), exo,
                   np.concatenate([s.target for s in sets]), np.concatenate([s.sensor for s in sets]),
                   np.concatenate([s.end_time for s in sets]), sets[0].target_index)


def window_count(length: int, in_len: int = IN_LEN, out_len: int = OUT_LEN, stride: int = 1) -> int:
    span = in_len + out_len
    return 0 if length < span else (length - span) // stride + 1


def make_windows(frames, in_len: int = IN_LEN, out_len: int = OUT_LEN, stride: int = 1,
                 target: str = "do", variables: tuple | None = None) -> WindowSet:
    """Slide over every gap-free run of each frame.

    A run of length L yields ``max(0, L - (in_len + out_len) + 1)`` pairs at
    stride 1.  When a frame carries an exogenous matrix, pairs whose
    forecast is unavailable are skipped.
    """
    frames = list(frames)
    if not frames:
        raise DataError("no frames")
    variables = variables or frames[0].variables
    cols = [frames[0].variables.index(v) for v in variables]
    t_idx = variables.index(target)
    use_exo = all(f.exo is not None for f in frames)
    span = in_len + out_len
    parts = []
    for f in frames:
        data = f.data[:, cols]
        for a, b in valid_runs(~np.isnan(data).any(axis=1)):
            n = window_count(b - a, in_len, out_len, stride)
            if n == 0:
                continue
            starts = a + np.arange(n) * stride
            seg = data[a:b]
            views = sliding_window_view(seg, span, axis=0)[starts - a]  # (n, V, span)
            hist = np.ascontiguousarray(views[:, :, :in_len].transpose(0, 2, 1))
            tgt = np.ascontiguousarray(views[:, t_idx, in_len:])
            ends = starts + in_len - 1
            exo = None
            keep = np.ones(n, dtype=bool)
            if use_exo:
                exo = f.exo[ends]
                keep = ~np.isnan(exo).any(axis=1)
            parts.append(WindowSet(hist[keep], None if exo is None else exo[keep], tgt[keep],
                                   np.full(int(keep.sum()), f.sensor_id, dtype=object),
                                   (f.start + ends * STEP)[keep], t_idx))
    if not parts:
        width = len(variables)
        return WindowSet(np.zeros((0, in_len, width)), np.zeros((0, out_len)) if use_exo else None,
                         np.zeros((0, out_len)), np.zeros(0, dtype=object),
                         np.zeros(0, dtype="datetime64[s]"), t_idx)
    return WindowSet.concat(parts) if len(parts) > 1 else parts[0]


# -- leave-one-out -----------------------------------------------------------

@dataclass
class SplitPlan:
    test_sensor: str
    train_sensors: list
    exclusions: list = field(default_factory=list)  # (sensor or None, start, end)

    def __post_init__(self):
        if self.test_sensor in self.train_sensors:
            raise DataError("test sensor may not be a training sensor")


@dataclass
class Split:
    plan: SplitPlan
    standardizer: Standardizer
    train: WindowSet
    test: WindowSet


def leave_one_out_split(frames: dict[str, SensorFrame], test_sensor: str, exclusions=(),
                        in_len: int = IN_LEN, out_len: int = OUT_LEN, target: str = "do",
                        variables: tuple | None = None, train_stride: int = 1,
                        test_stride: int = 1) -> Split:
    """Train on every sensor but ``test_sensor``; exclusions only touch training data.

    Frames should already be imputed.  The standardiser is fit on the
    (post-exclusion) training frames only and applied to both sides.
    """
    if len(frames) < 2:
        raise DataError("leave-one-out needs at least two sensors")
    if test_sensor not in frames:
        raise DataError(f"test sensor {test_sensor!r} absent")
    plan = SplitPlan(test_sensor, [s for s in sorted(frames) if s != test_sensor], list(exclusions))
    train_frames = [apply_exclusions(frames[s], plan.exclusions) for s in plan.train_sensors]
    variables = variables or frames[test_sensor].variables
    st = Standardizer.fit(train_frames, frames[test_sensor].variables)
    train = make_windows([st.apply_frame(f) for f in train_frames], in_len, out_len,
                         train_stride, target, variables)
    test = make_windows([st.apply_frame(frames[test_sensor])], in_len, out_len, test_stride,
                        target, variables)
    return Split(plan, st, train, test)


def load_dataset(data_dir, impute: bool = True) -> tuple[dict[str, SensorFrame], ForecastArchive | None]:
    """Read every ``sensor*.csv`` (and ``forecast.csv`` if present) into frames.

    Frames are gap-imputed unless ``impute`` is False.
    """
    data_dir = Path(data_dir)
    files = sorted(data_dir.glob("sensor*.csv"))
    if not files:
        raise DataError(f"no sensor CSV files in {data_dir}")
    series: dict[tuple[str, str], TimeSeries] = {}
    for path in files:
        for key, ts in load_csv(path).items():
            if key in series:
                raise DataError(f"{path.name}: series {key} already loaded from another file")
            series[key] = ts
    frames = build_frames(series)
    if impute:
        frames = {k: impute_frame(f) for k, f in frames.items()}
    archive = None
    if (data_dir / "forecast.csv").exists():
        archive = load_forecast_csv(data_dir / "forecast.csv")
        for f in frames.values():
            f.exo = archive.exo_matrix(f)
    return frames, archive
