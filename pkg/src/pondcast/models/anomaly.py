"""Univariate anomaly detectors, MSE scoring, thresholds, events and lead times.

Autoencoders reconstruct a 96-sample window; forecasters predict the next
96 samples from the preceding context.  A window's score is the MSE between
prediction and observation, stamped at the last sample of the scored span.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..datapipe import STEP, SensorFrame, WindowSet, format_time, make_windows
from ..nn import ops
from ..nn.layers import apply_dense, init_dense, init_lstm
from ..nn.losses import mse_loss
from ..nn.params import ParamSet
from ..nn.tensor import Tensor
from .forecast import CHECKPOINT_VERSION, ForecastConfig, ForecastOutput, build_model, read_checkpoint

AUTOENCODERS = ("rnnAe", "deepAe")
FORECASTERS = ("rnnAeFc", "seq2seq", "attention", "deepAnt", "transformer", "forecastNet")
DETECTOR_KINDS = AUTOENCODERS + FORECASTERS
SPAN = 96
DEFAULT_LEVEL = 0.7
PERCENTILE = 0.99
LOOKBACK_HOURS = 48.0
SCORE_HEADER = ["timestamp", "detector", "mse"]
EVENTS_VERSION = 1
CALIBRATION_STRIDE = 4

# Desk-scale training settings per detector: learning rate (from the search
# grid), stride between training windows, and epoch budget.  The recurrent
# models need denser or faster updates to leave the mean-predictor plateau.
TRAINING_PRESETS = {
    "rnnAe": {"lr": 1e-2, "stride": 2, "epochs": 10},
    "deepAe": {"lr": 1e-3, "stride": 8, "epochs": 10},
    "rnnAeFc": {"lr": 1e-2, "stride": 8, "epochs": 10},
    "seq2seq": {"lr": 1e-2, "stride": 8, "epochs": 10},
    "attention": {"lr": 1e-3, "stride": 8, "epochs": 10},
    "deepAnt": {"lr": 1e-3, "stride": 8, "epochs": 10},
    "transformer": {"lr": 1e-3, "stride": 8, "epochs": 15},
    "forecastNet": {"lr": 1e-3, "stride": 8, "epochs": 10},
}


@dataclass
class DetectorConfig:
    kind: str
    variable: str = "do"
    hidden: int = 24  # LSTM width (rnnAe, rnnAeFc, seq2seq, attention)
    deep_sizes: tuple = (56, 41, 32)  # deepAe encoder; the decoder mirrors it
    conv_filters: int = 32
    conv_width: int = 8
    pool: int = 2
    fn_width: int = 24
    fn_layers: int = 2
    d_model: int = 16
    heads: int = 4
    ff_width: int = 24
    sampling_prob: float = 1.0  # transformer: share of decoder inputs taken from its own forecast in training
    context: int | None = None  # defaults by kind; rnnAeFc reads only 96 past samples

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        self.deep_sizes = tuple(int(s) for s in self.deep_sizes)
        if self.context is None:
            self.context = SPAN if self.kind in ("rnnAe", "deepAe", "rnnAeFc") else 2 * SPAN
        if self.family == "autoencoder" and self.context != SPAN:
            raise ValueError("autoencoders read exactly the 96-sample window they reconstruct")

    @property
    def family(self) -> str:
        return "autoencoder" if self.kind in AUTOENCODERS else "forecaster"

    @property
    def window(self) -> int:
        """Samples covered by one scored window (context plus scored span)."""
        return SPAN if self.family == "autoencoder" else self.context + SPAN

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deep_sizes"] = list(self.deep_sizes)
        return d


# -- detector networks -------------------------------------------------------

class Detector:
    """Maps ``(B, context, 1)`` inputs to ``(B, 96)`` predictions.

    Exposes the ``params``/``loss``/``predict`` interface the trainer uses.
    For autoencoders the target is the input window itself.
    """

    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        self.params = ParamSet(seed)
        self._init()

    def _init(self) -> None:
        raise NotImplementedError

    def forward(self, x) -> Tensor:
        raise NotImplementedError

    def _check(self, history) -> np.ndarray:
        x = np.asarray(history, dtype=np.float64)
        if x.ndim == 2:
            x = x[..., None]
        if x.shape[1:] != (self.config.context, 1):
            raise ValueError(f"detector input shape {x.shape[1:]} != {(self.config.context, 1)}")
        return x

    def loss(self, history, exo, target) -> Tensor:
        return mse_loss(self.forward(self._check(history)), np.asarray(target, dtype=np.float64))

    def predict(self, history, exo=None, batch_size: int = 512) -> ForecastOutput:
        x = self._check(history)
        parts = [self.forward(x[a:a + batch_size]).data for a in range(0, len(x), batch_size)]
        return ForecastOutput(np.concatenate(parts) if parts else np.zeros((0, SPAN)))


def _zeros(batch, hidden):
    return np.zeros((batch, hidden))


class RnnAe(Detector):
    """LSTM encoder to a 24-d code; LSTM decoder fed the code at every step."""

    def _init(self):
        h = self.config.hidden
        init_lstm(self.params, "enc", 1, h)
        init_lstm(self.params, "dec", h, h)
        init_dense(self.params, "out", h, 1)

    def forward(self, x):
        p, h = self.params, self.config.hidden
        batch = len(x)
        states, _ = ops.lstm_sequence(x, _zeros(batch, h), _zeros(batch, h), p["enc.w_x"], p["enc.w_h"], p["enc.b"])
        code = ops.getitem(states, (slice(None), -1))
        rep = ops.mul(ops.reshape(code, (batch, 1, h)), np.ones((1, SPAN, 1)))
        dec, _ = ops.lstm_sequence(rep, _zeros(batch, h), _zeros(batch, h), p["dec.w_x"], p["dec.w_h"], p["dec.b"])
        return ops.reshape(apply_dense(p, "out", dec), (batch, SPAN))


class DeepAe(Detector):
    """Dense autoencoder 96 -> 56 -> 41 -> 32 -> 41 -> 56 -> 96 (tanh hidden layers)."""

    def _init(self):
        sizes = (SPAN, *self.config.deep_sizes)
        self.layers = list(zip(sizes[:-1], sizes[1:])) + list(zip(sizes[::-1][:-1], sizes[::-1][1:]))
        for i, (a, b) in enumerate(self.layers):
            init_dense(self.params, f"l{i}", a, b)

    def forward(self, x):
        z = x[..., 0]
        last = len(self.layers) - 1
        for i in range(len(self.layers)):
            z = apply_dense(self.params, f"l{i}", z, "linear" if i == last else "tanh")
        return z


class _RecurrentForecaster(Detector):
    """Stacked LSTM encoder; stacked LSTM decoder fed its own previous output."""

    depth = 1

    def _init(self):
        h = self.config.hidden
        for i in range(self.depth):
            init_lstm(self.params, f"enc{i}", 1 if i == 0 else h, h)
            init_lstm(self.params, f"dec{i}", 1 if i == 0 else h, h)
        init_dense(self.params, "out", h, 1)

    def forward(self, x):
        p, h = self.params, self.config.hidden
        batch = len(x)
        seq, hs, cs = x, [], []
        for i in range(self.depth):
            seq, c = ops.lstm_sequence(seq, _zeros(batch, h), _zeros(batch, h),
                                       p[f"enc{i}.w_x"], p[f"enc{i}.w_h"], p[f"enc{i}.b"])
            hs.append(ops.getitem(seq, (slice(None), -1)))
            cs.append(c)
        y = x[:, -1, :]
        outs = []
        for _ in range(SPAN):
            inp = y
            for i in range(self.depth):
                hs[i], cs[i] = ops.lstm_cell(inp, hs[i], cs[i], p[f"dec{i}.w_x"], p[f"dec{i}.w_h"], p[f"dec{i}.b"])
                inp = hs[i]
            y = apply_dense(p, "out", inp)
            outs.append(y)
        return ops.concat(outs, axis=1)


class RnnAeFc(_RecurrentForecaster):
    depth = 1


class Seq2Seq(_RecurrentForecaster):
    depth = 2


class DeepAnt(Detector):
    """Two conv(8 x 32) + ReLU + max-pool(2) stages, then a dense map to 96 outputs."""

    def _init(self):
        c = self.config
        length = c.context
        for i in range(2):
            c_in = 1 if i == 0 else c.conv_filters
            self.params.glorot(f"conv{i}.w", c_in * c.conv_width, c.conv_filters,
                               shape=(c.conv_filters, c_in, c.conv_width))
            self.params.zeros(f"conv{i}.b", (c.conv_filters, 1))
            length = (length - c.conv_width + 1) // c.pool
        self.flat = c.conv_filters * length
        init_dense(self.params, "out", self.flat, SPAN)

    def forward(self, x):
        p, c = self.params, self.config
        z = ops.transpose(x, (0, 2, 1))
        for i in range(2):
            z = ops.relu(ops.add(ops.conv1d(z, p[f"conv{i}.w"]), p[f"conv{i}.b"]))
            z = ops.maxpool1d(z, c.pool)
        return apply_dense(p, "out", ops.reshape(z, (len(x), self.flat)))


class _Wrapped(Detector):
    """Univariate, standard (no exogenous input) forecast model as a detector."""

    def _forecast_config(self) -> ForecastConfig:
        raise NotImplementedError

    def _init(self):
        self.model = build_model(self._forecast_config(), self.params.seed)
        self.params = self.model.params

    def forward(self, x):
        mu, _ = self.model.forward(x, None, None, mode="autoregressive")
        return mu

    def loss(self, history, exo, target):
        return self.model.loss(self._check(history), None, target)

    def predict(self, history, exo=None, batch_size: int = 512) -> ForecastOutput:
        return self.model.predict(self._check(history), None, batch_size)


class AttentionDetector(_Wrapped):
    def _forecast_config(self):
        c = self.config
        return ForecastConfig("attention", proposed=False, n_vars=1, in_len=c.context, out_len=SPAN,
                              rnn_hidden=c.hidden)


class TransformerDetector(_Wrapped):
    def _forecast_config(self):
        c = self.config
        return ForecastConfig("transformer", proposed=False, n_vars=1, in_len=c.context, out_len=SPAN,
                              d_model=c.d_model, heads=c.heads, ff_width=c.ff_width,
                              sampling_prob=c.sampling_prob)


class ForecastNetDetector(_Wrapped):
    def _forecast_config(self):
        c = self.config
        return ForecastConfig("forecastnet", proposed=False, n_vars=1, in_len=c.context, out_len=SPAN,
                              fn_width=c.fn_width, fn_layers=c.fn_layers)


DETECTOR_CLASSES = {
    "rnnAe": RnnAe, "deepAe": DeepAe, "rnnAeFc": RnnAeFc, "seq2seq": Seq2Seq,
    "attention": AttentionDetector, "deepAnt": DeepAnt, "transformer": TransformerDetector,
    "forecastNet": ForecastNetDetector,
}


def build_detector(config: DetectorConfig, seed: int = 0) -> Detector:
    if config.kind not in DETECTOR_CLASSES:
        raise ValueError(f"unknown detector kind {config.kind!r}")
    return DETECTOR_CLASSES[config.kind](config, seed)


def detector_windows(frames, config: DetectorConfig, stride: int = 1) -> WindowSet:
    """Training pairs for one detector from (standardized) frames; exogenous data dropped."""
    bare = [SensorFrame(f.sensor_id, f.start, f.data, f.variables, None) for f in frames]
    if config.family == "autoencoder":
        ws = make_windows(bare, SPAN, 0, stride, config.variable, (config.variable,))
        ws.target = np.ascontiguousarray(ws.history[:, :, 0])
        return ws
    return make_windows(bare, config.context, SPAN, stride, config.variable, (config.variable,))


def fit_detector(config: DetectorConfig, train_frames, seed: int = 0, preset: dict | None = None,
                 patience: int = 3, percentile: float = PERCENTILE):
    """Train one detector on standardized frames and calibrate its threshold.

    Returns ``(detector, train_result, theta)`` where ``theta`` is the
    nearest-rank ``percentile`` of the detector's scores on its own
    training frames.
    """
    from ..training import TrainConfig, train

    preset = {**TRAINING_PRESETS[config.kind], **(preset or {})}
    det = build_detector(config, seed)
    data = detector_windows(train_frames, config, preset["stride"])
    if len(data) == 0:
        raise ValueError(f"no training windows for detector {config.kind}")
    result = train(det, data, TrainConfig(lr=preset["lr"], max_epochs=preset["epochs"], patience=patience,
                                          seed=seed))
    cal = [score(det, f.data[:, f.variables.index(config.variable)], f.start, stride=CALIBRATION_STRIDE).mse
           for f in train_frames]
    return det, result, calibrate_threshold(np.concatenate(cal), percentile)


# -- scoring -----------------------------------------------------------------

@dataclass
class ScoreSeries:
    detector: str
    times: np.ndarray  # datetime64[s], last sample of each scored span
    mse: np.ndarray

    def __len__(self) -> int:
        return len(self.mse)

    def subset(self, mask) -> "ScoreSeries":
        return ScoreSeries(self.detector, self.times[mask], self.mse[mask])


def score(detector: Detector, values, start, name: str | None = None, batch_size: int = 512,
          stride: int = 1) -> ScoreSeries:
    """MSE scores over a standardized 1-D series starting at ``start``.

    Windows containing a missing sample are skipped.  A series shorter than
    one window yields an empty result.  ``stride`` > 1 thins the windows
    (useful when only the score distribution matters, as in calibration).
    """
    c = detector.config
    name = name or c.kind
    values = np.asarray(values, dtype=np.float64)
    start = np.datetime64(start, "s")
    if len(values) < c.window:
        return ScoreSeries(name, np.zeros(0, dtype="datetime64[s]"), np.zeros(0))
    win = sliding_window_view(values, c.window)
    keep = np.flatnonzero(~np.isnan(win).any(axis=1))
    keep = keep[keep % stride == 0]
    mse = np.empty(len(keep))
    for a in range(0, len(keep), batch_size):
        idx = keep[a:a + batch_size]
        w = win[idx]
        pred = detector.predict(w[:, :c.context, None]).mean
        mse[a:a + len(idx)] = np.mean((pred - w[:, -SPAN:]) ** 2, axis=1)
    times = start + (keep + c.window - 1) * STEP
    return ScoreSeries(name, times, mse)


def calibrate_threshold(scores, percentile: float = PERCENTILE) -> float:
    """Nearest-rank percentile: the ``ceil(percentile * n)``-th smallest score."""
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    if s.size == 0:
        raise ValueError("no scores to calibrate on")
    if not 0.0 < percentile <= 1.0:
        raise ValueError("percentile must be in (0, 1]")
    rank = max(1, math.ceil(percentile * s.size))
    return float(s[rank - 1])


@dataclass
class Event:
    detector: str
    enter: np.datetime64
    exit: np.datetime64
    peak_mse: float

    def to_dict(self) -> dict:
        return {"detector": self.detector, "enter": format_time(self.enter), "exit": format_time(self.exit),
                "peak_mse": self.peak_mse}


def detect(scores: ScoreSeries, theta_max: float, level_fraction: float = DEFAULT_LEVEL) -> list[Event]:
    """Maximal runs of consecutive scores strictly above ``level_fraction * theta_max``."""
    if not 0.0 < level_fraction <= 1.0:
        raise ValueError("level fraction must be in (0, 1]")
    above = scores.mse > level_fraction * theta_max
    events = []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], above.astype(np.int8), [0]])))
    for a, b in zip(edges[::2], edges[1::2]):
        events.append(Event(scores.detector, scores.times[a], scores.times[b - 1], float(scores.mse[a:b].max())))
    return events


@dataclass
class LeadTime:
    hours: float | None  # None: no crossing before the end of the event window
    crossing: np.datetime64 | None
    minimum: np.datetime64

    @property
    def detected(self) -> bool:
        return self.hours is not None

    def to_dict(self) -> dict:
        return {"lead_hours": self.hours, "detected": self.detected,
                "crossing": None if self.crossing is None else format_time(self.crossing),
                "do_minimum": format_time(self.minimum)}


def lead_time(scores: ScoreSeries, threshold: float, do_values, do_start, event_start, event_end,
              lookback_hours: float = LOOKBACK_HOURS) -> LeadTime:
    """Hours from the threshold crossing that leads into the event to its DO minimum.

    Within ``lookback_hours`` before the event window up to its end, the
    crossing is the entry of the first above-threshold run that lasts into
    the event window; excursions that end before the event are ignored.
    Positive values mean early warning.
    """
    do_values = np.asarray(do_values, dtype=np.float64)
    t_do = np.datetime64(do_start, "s") + np.arange(len(do_values)) * STEP
    ev_a, ev_b = np.datetime64(event_start, "s"), np.datetime64(event_end, "s")
    inside = (t_do >= ev_a) & (t_do <= ev_b) & ~np.isnan(do_values)
    if not inside.any():
        raise ValueError("no DO samples inside the event window")
    t_min = t_do[inside][np.argmin(do_values[inside])]
    lo = ev_a - np.timedelta64(int(round(lookback_hours * 3600)), "s")
    sel = (scores.times >= lo) & (scores.times <= ev_b)
    times, above = scores.times[sel], scores.mse[sel] > threshold
    edges = np.flatnonzero(np.diff(np.concatenate([[0], above.astype(np.int8), [0]])))
    runs = [(a, b - 1) for a, b in zip(edges[::2], edges[1::2]) if times[b - 1] >= ev_a]
    if not runs:
        return LeadTime(None, None, t_min)
    t_cross = times[runs[0][0]]
    return LeadTime(float((t_min - t_cross) / np.timedelta64(1, "h")), t_cross, t_min)


# -- export ------------------------------------------------------------------

def write_scores_csv(series: list[ScoreSeries], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for s in series:
            for t, m in zip(s.times, s.mse):
                w.writerow([format_time(t), s.detector, repr(float(m))])


def read_scores_csv(path) -> dict[str, ScoreSeries]:
    rows: dict[str, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SCORE_HEADER:
            raise ValueError(f"{path}: expected header {SCORE_HEADER}")
        for t, name, m in reader:
            ts, ms = rows.setdefault(name, ([], []))
            ts.append(np.datetime64(t.rstrip("Z"), "s"))
            ms.append(float(m))
    return {k: ScoreSeries(k, np.array(ts, dtype="datetime64[s]"), np.array(ms)) for k, (ts, ms) in rows.items()}


def events_json(events: list[Event], extra: dict | None = None) -> str:
    doc = {"schema_version": EVENTS_VERSION, "events": [e.to_dict() for e in events]}
    doc.update(extra or {})
    return json.dumps(doc, indent=2, sort_keys=True)


def save_detector(det: Detector, path, extra: dict | None = None) -> None:
    doc = {
        "schema_version": CHECKPOINT_VERSION,
        "family": "detector",
        "config": det.config.to_dict(),
        "seed": det.params.seed,
        "params": {name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                   for name, t in det.params.items()},
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_detector(path) -> tuple[Detector, dict]:
    doc = read_checkpoint(path)
    if doc.get("family") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    det = build_detector(DetectorConfig.from_dict(doc["config"]), doc.get("seed", 0))
    det.params.load_state_dict(doc["state"])
    return det, doc.get("extra", {})
