"""Seeded synthetic pond data with injectable DO crashes and biofouling.

Each variable is a diurnal sinusoid plus coupling terms plus Gaussian noise.
Air temperature carries a slow weather anomaly (an Ornstein-Uhlenbeck
process); water temperature follows a low-passed copy of it, and DO follows
water temperature with a lag.  That chain is what lets an air-temperature
forecast improve DO forecasts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .datapipe import (
    HISTORY_VARIABLES,
    STEP,
    ForecastArchive,
    TimeSeries,
    parse_time,
)

STEPS_PER_HOUR = 4
STEPS_PER_DAY = 96
BURN_IN_STEPS = 2 * STEPS_PER_DAY


@dataclass
class VariableParams:
    base: float
    amplitude: float
    phase_hours: float
    noise_std: float


def _default_variables() -> dict:
    return {
        # DO trails water temperature by the coupling lag (2 h) so both routes agree
        "do": VariableParams(7.0, 2.5, 11.0, 0.25),
        "ph": VariableParams(8.0, 0.25, 11.0, 0.02),
        "chlorophyll": VariableParams(60.0, 4.0, 11.0, 1.5),
        "water_temp": VariableParams(29.0, 1.2, 9.0, 0.05),
        "air_temp": VariableParams(27.0, 5.0, 9.0, 0.3),
    }


@dataclass
class PondParams:
    """Generator settings for one pond.  ``seed`` fixes the whole trajectory."""

    variables: dict = field(default_factory=_default_variables)
    weather_std: float = 3.0  # degC, stationary std of the air-temperature anomaly
    weather_tau_hours: float = 36.0
    water_tau_hours: float = 6.0  # low-pass time constant from air to water anomaly
    air_to_water: float = 0.8
    water_to_do: float = 0.5  # mg/L per degC of lagged water-temperature anomaly
    do_lag_hours: float = 2.0
    chlorophyll_tau_hours: float = 120.0
    chlorophyll_log_std: float = 0.15
    chlorophyll_to_do: float = 0.5  # exponent on chl/base scaling the DO amplitude
    do_to_ph: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.variables = {k: v if isinstance(v, VariableParams) else VariableParams(**v)
                          for k, v in self.variables.items()}
        for name, v in self.variables.items():
            if v.amplitude < 0 or v.noise_std < 0:
                raise ValueError(f"{name}: amplitude and noise std must be >= 0")
        if self.weather_std < 0 or self.chlorophyll_log_std < 0:
            raise ValueError("process std must be >= 0")

    def quiet(self) -> "PondParams":
        """Copy with all noise and couplings switched off (pure sinusoids)."""
        return replace(
            self,
            variables={k: replace(v, noise_std=0.0) for k, v in self.variables.items()},
            weather_std=0.0, air_to_water=0.0, water_to_do=0.0, chlorophyll_log_std=0.0,
            chlorophyll_to_do=0.0, do_to_ph=0.0,
        )


def _ou(n: int, std: float, tau_steps: float, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(n)
    if std == 0.0:
        return np.zeros(n)
    phi = np.exp(-1.0 / tau_steps)
    scale = std * np.sqrt(1.0 - phi * phi)
    out = np.empty(n)
    out[0] = std * eps[0]
    for k in range(1, n):
        out[k] = phi * out[k - 1] + scale * eps[k]
    return out


def _low_pass(x: np.ndarray, tau_steps: float) -> np.ndarray:
    alpha = 1.0 / tau_steps
    out = np.empty_like(x)
    acc = x[0]
    for k in range(len(x)):
        acc += alpha * (x[k] - acc)
        out[k] = acc
    return out


def _diurnal(v: VariableParams, hours: np.ndarray) -> np.ndarray:
    return v.amplitude * np.sin(2.0 * np.pi * (hours - v.phase_hours) / 24.0)


def weather_anomaly(n_steps: int, params: PondParams, seed: int) -> np.ndarray:
    """Air-temperature anomaly shared by all ponds of a farm (includes burn-in)."""
    rng = np.random.default_rng(seed)
    return _ou(n_steps + BURN_IN_STEPS, params.weather_std,
               params.weather_tau_hours * STEPS_PER_HOUR, rng)


def gen_pond(days: int, params: PondParams, start="2020-01-01T00:00:00Z", sensor_id: str = "pond1",
             weather: np.ndarray | None = None) -> dict[str, TimeSeries]:
    """Generate the five history variables for one pond on the 15-minute grid."""
    if days < 1:
        raise ValueError("days must be >= 1")
    start = parse_time(start) if isinstance(start, str) else np.datetime64(start, "s")
    n = days * STEPS_PER_DAY
    total = n + BURN_IN_STEPS
    if weather is None:
        weather = weather_anomaly(n, params, params.seed + 7919)
    if len(weather) != total:
        raise ValueError("weather anomaly length does not match the requested span")
    rng = np.random.default_rng(params.seed)
    hours = (np.arange(total) - BURN_IN_STEPS) / STEPS_PER_HOUR
    p = params.variables

    air_true = p["air_temp"].base + _diurnal(p["air_temp"], hours) + weather
    water_anom = _diurnal(p["water_temp"], hours) + params.air_to_water * _low_pass(
        weather, params.water_tau_hours * STEPS_PER_HOUR)
    water_true = p["water_temp"].base + water_anom

    chl_log = _ou(total, params.chlorophyll_log_std, params.chlorophyll_tau_hours * STEPS_PER_HOUR, rng)
    chl_true = p["chlorophyll"].base * np.exp(chl_log) + _diurnal(p["chlorophyll"], hours)

    lag = int(round(params.do_lag_hours * STEPS_PER_HOUR))
    lagged = np.concatenate([np.full(lag, water_anom[0]), water_anom[:total - lag]]) if lag else water_anom
    amp_scale = np.exp(params.chlorophyll_to_do * chl_log)
    do_true = p["do"].base + amp_scale * _diurnal(p["do"], hours) + params.water_to_do * lagged
    ph_true = p["ph"].base + _diurnal(p["ph"], hours) + params.do_to_ph * (do_true - p["do"].base)

    truth = {"do": do_true, "ph": ph_true, "chlorophyll": chl_true,
             "water_temp": water_true, "air_temp": air_true}
    out = {}
    for name in HISTORY_VARIABLES:
        noise = rng.standard_normal(total) * p[name].noise_std
        values = (truth[name] + noise)[BURN_IN_STEPS:]
        out[name] = TimeSeries(sensor_id, name, start, values)
    return out


# -- injections --------------------------------------------------------------

# Defaults per injection kind: (duration in hours, severity).
INJECTION_DEFAULTS = {"do_crash": (12.0, 0.85), "biofouling": (216.0, 1.0)}


@dataclass
class AnomalyInjection:
    kind: str  # "do_crash" or "biofouling"
    start: np.datetime64
    duration_hours: float | None = None
    severity: float | None = None

    def __post_init__(self):
        if self.kind not in INJECTION_DEFAULTS:
            raise ValueError(f"unknown injection kind {self.kind!r}")
        hours, severity = INJECTION_DEFAULTS[self.kind]
        self.duration_hours = float(hours if self.duration_hours is None else self.duration_hours)
        self.severity = float(severity if self.severity is None else self.severity)
        if not 0.0 < self.severity <= 1.0:
            raise ValueError("severity must be in (0, 1]")
        if self.duration_hours <= 0:
            raise ValueError("duration must be positive")
        self.start = parse_time(self.start) if isinstance(self.start, str) else np.datetime64(self.start, "s")

    @property
    def end(self) -> np.datetime64:
        return self.start + np.timedelta64(int(round(self.duration_hours * 3600)), "s")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": str(self.start) + "Z",
                "duration_hours": self.duration_hours, "severity": self.severity}


def _window_indices(series: TimeSeries, inj: AnomalyInjection) -> tuple[int, int]:
    a = int((inj.start - series.start) // STEP)
    b = int((inj.end - series.start) // STEP)
    if a < 0 or b > len(series) - 1 or (inj.start - series.start) % STEP:
        raise ValueError("injection window outside the series span or off the grid")
    return a, b


def inject_do_crash(series: TimeSeries, inj: AnomalyInjection) -> TimeSeries:
    """Multiply DO by a cosine taper reaching ``1 - severity`` at the window midpoint."""
    if inj.kind != "do_crash":
        raise ValueError("not a do_crash injection")
    a, b = _window_indices(series, inj)
    values = series.values.copy()
    phase = np.arange(b - a + 1) / (b - a)
    taper = 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
    values[a:b + 1] = values[a:b + 1] * (1.0 - inj.severity * taper)
    return TimeSeries(series.sensor_id, series.variable, series.start, values)


def inject_biofouling(series: TimeSeries, inj: AnomalyInjection, decay_per_hour: float = 0.1,
                      drift_fraction: float = 0.5, drift_tau_hours: float = 72.0) -> TimeSeries:
    """Attenuate and drift a sensor's readings from ``inj.start`` until ``inj.end``.

    The daily swing around the pre-fouling 24 h mean decays as
    ``exp(-severity * decay_per_hour * t)`` while the whole reading drifts
    multiplicatively toward ``1 - severity * drift_fraction`` of itself.
    """
    if inj.kind != "biofouling":
        raise ValueError("not a biofouling injection")
    a, b = _window_indices(series, inj)
    values = series.values.copy()
    ref = values[max(0, a - STEPS_PER_DAY):a] if a > 0 else values[a:a + STEPS_PER_DAY]
    level = float(np.nanmean(ref))
    hours = np.arange(b - a + 1) / STEPS_PER_HOUR
    attenuation = np.exp(-inj.severity * decay_per_hour * hours)
    drift = 1.0 - inj.severity * drift_fraction * (1.0 - np.exp(-hours / drift_tau_hours))
    seg = values[a:b + 1]
    values[a:b + 1] = (level + (seg - level) * attenuation) * drift
    return TimeSeries(series.sensor_id, series.variable, series.start, values)


def inject_missing(series: TimeSeries, gaps: list[tuple[int, int]]) -> TimeSeries:
    """Blank ``(start_index, length)`` runs."""
    values = series.values.copy()
    for a, length in gaps:
        values[a:a + length] = np.nan
    return TimeSeries(series.sensor_id, series.variable, series.start, values)


# -- forecasts ---------------------------------------------------------------

def gen_air_forecast(truth: TimeSeries, error_std: float = 1.0, horizon_hours: int = 24,
                     seed: int = 0) -> ForecastArchive:
    """Hourly-issued forecasts: truth plus noise whose std grows linearly with lead.

    An issue at hour ``h`` carries values valid at ``h, h+1, ..., h+horizon``;
    the lead-0 value is exact.
    """
    rng = np.random.default_rng(seed)
    past_hour = int((truth.start - truth.start.astype("datetime64[h]")) // STEP)
    first = (STEPS_PER_HOUR - past_hour) % STEPS_PER_HOUR
    hourly = truth.values[first::STEPS_PER_HOUR]
    t0 = truth.start + first * STEP
    n_issues = len(hourly) - horizon_hours
    if n_issues < 1:
        raise ValueError("truth does not cover one forecast horizon")
    leads = np.arange(horizon_hours + 1)
    idx = np.arange(n_issues)[:, None] + leads[None, :]
    noise = rng.standard_normal((n_issues, horizon_hours + 1)) * (error_std * leads / horizon_hours)
    issued = t0 + np.arange(n_issues) * np.timedelta64(1, "h")
    return ForecastArchive(issued.astype("datetime64[s]"), hourly[idx] + noise)


# -- scenarios ---------------------------------------------------------------

@dataclass
class Scenario:
    """A farm: several ponds sharing weather, with optional injections."""

    name: str = "paperlike"
    sensors: int = 3
    days: int = 60
    start: str = "2020-01-01T00:00:00Z"
    seed: int = 0
    forecast_error_std: float = 1.0
    pond_jitter: float = 0.1  # relative spread of pond bases/amplitudes
    missing_gaps_per_sensor: int = 0
    injections: list = field(default_factory=list)  # dicts with "sensor" + injection fields
    pond: dict = field(default_factory=dict)  # PondParams overrides

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def sensor_ids(self) -> list[str]:
        return [f"pond{i + 1}" for i in range(self.sensors)]


def paperlike(seed: int = 0, **overrides) -> Scenario:
    """Three simulated sensors over 60 days; DO around 7 mg/L swinging 2.5 mg/L."""
    return Scenario(seed=seed, **overrides)


def _pond_params(scn: Scenario, index: int) -> PondParams:
    base = PondParams(**scn.pond) if scn.pond else PondParams()
    rng = np.random.default_rng([scn.seed, index, 17])
    jitter = scn.pond_jitter
    variables = {}
    for name, v in base.variables.items():
        variables[name] = VariableParams(
            base=v.base * (1.0 + jitter * 0.1 * rng.uniform(-1, 1)) if name != "air_temp" else v.base,
            amplitude=v.amplitude * (1.0 + jitter * rng.uniform(-1, 1)) if name != "air_temp" else v.amplitude,
            phase_hours=v.phase_hours + (jitter * 5.0 * rng.uniform(-1, 1) if name != "air_temp" else 0.0),
            noise_std=v.noise_std,
        )
    return replace(base, variables=variables, seed=int(rng.integers(2**31)))


def generate(scn: Scenario) -> tuple[dict[str, dict[str, TimeSeries]], ForecastArchive, list]:
    """Build every pond's series, the shared forecast archive and parsed injections.

    Air temperature is a farm-wide weather-station reading, identical across
    ponds.  Returns ``(ponds, archive, injections)`` where injections are
    ``(sensor_id, AnomalyInjection)`` pairs already applied to the data.
    """
    base = PondParams(**scn.pond) if scn.pond else PondParams()
    n = scn.days * STEPS_PER_DAY
    weather = weather_anomaly(n, base, scn.seed)
    ponds = {}
    for i, sensor in enumerate(scn.sensor_ids()):
        ponds[sensor] = gen_pond(scn.days, _pond_params(scn, i), scn.start, sensor, weather)
    station = ponds[scn.sensor_ids()[0]]["air_temp"]
    for sensor in scn.sensor_ids():
        ponds[sensor]["air_temp"] = TimeSeries(sensor, "air_temp", station.start, station.values.copy())
    archive = gen_air_forecast(station, scn.forecast_error_std, seed=scn.seed + 1)

    injections = []
    for spec in scn.injections:
        spec = dict(spec)
        sensor = spec.pop("sensor")
        inj = AnomalyInjection(**spec)
        series = ponds[sensor]["do"]
        ponds[sensor]["do"] = inject_do_crash(series, inj) if inj.kind == "do_crash" \
            else inject_biofouling(series, inj)
        injections.append((sensor, inj))

    if scn.missing_gaps_per_sensor:
        rng = np.random.default_rng([scn.seed, 99])
        for sensor in scn.sensor_ids():
            for name in HISTORY_VARIABLES:
                gaps = [(int(rng.integers(0, n - 12)), int(rng.integers(1, 13)))
                        for _ in range(scn.missing_gaps_per_sensor)]
                ponds[sensor][name] = inject_missing(ponds[sensor][name], gaps)
    return ponds, archive, injections


def scenario_frames(scn: Scenario):
    """Generate a scenario and return imputed sensor frames with exo matrices.

    Returns ``(frames, archive, injections)``; frames are keyed by sensor.
    """
    from .datapipe import build_frames, impute_frame

    ponds, archive, injections = generate(scn)
    series = {(sensor, name): ts for sensor, d in ponds.items() for name, ts in d.items()}
    frames = {k: impute_frame(f) for k, f in build_frames(series).items()}
    for f in frames.values():
        f.exo = archive.exo_matrix(f)
    return frames, archive, injections
