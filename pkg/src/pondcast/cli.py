"""``pondcast`` command line: synth, train, eval, detect, pipeline, config show.

Exit codes: 0 success, 1 computation failure, 2 configuration or I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .datapipe import (
    FORECAST_VARIABLE,
    STEP,
    DataError,
    Standardizer,
    apply_exclusions,
    format_time,
    impute_values,
    leave_one_out_split,
    load_dataset,
    parse_time,
    write_csv,
    write_forecast_csv,
)
from .evaluation import REPORT_VERSION, SeasonalNaive, evaluate
from .gauges import default_specs, gauge_report
from .models.anomaly import (
    SPAN,
    DetectorConfig,
    detect,
    events_json,
    fit_detector,
    lead_time,
    load_detector,
    save_detector,
    score,
    write_scores_csv,
)
from .models.forecast import ForecastConfig, build_model, load_checkpoint, save_checkpoint
from .synth import AnomalyInjection, Scenario, generate
from .training import TrainConfig, lr_search, train

log = logging.getLogger("pondcast")


class ComputationError(RuntimeError):
    """A model failed to train or a required artifact is missing (exit code 1)."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create directory {path}: {exc}") from exc
    return path


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc


def _load_data(cfg: RunConfig, impute: bool = True):
    data_dir = cfg.path("data_dir")
    if not data_dir.is_dir():
        raise ConfigError(f"data directory {data_dir} does not exist")
    frames, archive = load_dataset(data_dir, impute)
    if cfg.test_sensor not in frames:
        raise ConfigError(f"test sensor {cfg.test_sensor!r} not in data")
    injections = []
    inj_path = data_dir / "injections.json"
    if inj_path.exists():
        for d in json.loads(inj_path.read_text())["injections"]:
            d = dict(d)
            injections.append((d.pop("sensor"), AnomalyInjection(**d)))
    return frames, archive, injections


def _exclusions(cfg: RunConfig, injections) -> list:
    """Injected anomalies on training sensors never reach a training set."""
    return [(s, inj.start, inj.end) for s, inj in injections if s != cfg.test_sensor]


def _model_name(var: str, kind: str, variant: str) -> str:
    return f"forecast_{var}_{kind}_{variant}"


def _forecast_jobs(cfg: RunConfig) -> list[tuple[str, str, str]]:
    jobs = [(cfg.target, k, v) for k in cfg.forecast_kinds for v in cfg.variants]
    for var in cfg.gauge_variables:
        if (var, cfg.pipeline_kind, "proposed") not in jobs:
            jobs.append((var, cfg.pipeline_kind, "proposed"))
    return jobs


def _load_standardizer(cfg: RunConfig) -> Standardizer:
    path = cfg.path("model_dir") / "standardizer.json"
    if not path.exists():
        raise ComputationError(f"missing {path}; run `pondcast train` first")
    return Standardizer.from_dict(json.loads(path.read_text()))


def _load_forecaster(cfg: RunConfig, name: str):
    path = cfg.path("model_dir") / f"{name}.json"
    if not path.exists():
        raise ComputationError(f"missing checkpoint {path}")
    return load_checkpoint(path)


def _load_det(cfg: RunConfig, kind: str):
    path = cfg.path("model_dir") / f"detector_{kind}.json"
    if not path.exists():
        raise ComputationError(f"missing checkpoint {path}")
    return load_detector(path)


# -- synth -------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    scn = Scenario(**{**cfg.scenario, "seed": cfg.seed})
    ponds, archive, injections = generate(scn)
    out = _mkdir(cfg.path("data_dir"))
    try:
        for sensor, series in ponds.items():
            for var, ts in series.items():
                write_csv([ts], out / f"sensor_{sensor}_{var}.csv")
        write_forecast_csv(archive, out / "forecast.csv")
    except OSError as exc:
        raise ConfigError(f"cannot write data to {out}: {exc}") from exc
    _write(out / "injections.json", _dump({
        "schema_version": 1, "seed": cfg.seed,
        "injections": [{"sensor": s, **inj.to_dict()} for s, inj in injections]}))
    _write(out / "scenario.json", _dump({"schema_version": 1, **scn.to_dict()}))
    log.info("wrote %d series for %d ponds to %s", sum(len(v) for v in ponds.values()), len(ponds), out)
    return 0


# -- train -------------------------------------------------------------------

def _train_config(cfg: RunConfig, **kw) -> TrainConfig:
    t = cfg.train
    base = dict(lr=t["lr"] or 1e-3, lr_grid=tuple(t["lr_grid"]), batch_size=t["batch_size"],
                max_epochs=t["max_epochs"], patience=t["patience"], min_delta=t["min_delta"],
                val_fraction=t["val_fraction"], seed=cfg.seed)
    base.update(kw)
    return TrainConfig(**base)


def _fit_forecaster(cfg: RunConfig, config: ForecastConfig, data):
    """Fixed learning rate, or a short grid search followed by full training."""
    search = None
    if cfg.train["lr"] is None:
        short = _train_config(cfg, max_epochs=cfg.train["search_epochs"])
        lr, losses, _ = lr_search(lambda seed: build_model(config, seed), data, short)
        search = {repr(k): v for k, v in losses.items()}
    else:
        lr = float(cfg.train["lr"])
    model = build_model(config, cfg.seed)
    result = train(model, data, _train_config(cfg), lr=lr)
    return model, result, search


def cmd_train(cfg: RunConfig) -> int:
    frames, _, injections = _load_data(cfg)
    model_dir = _mkdir(cfg.path("model_dir"))
    exclusions = _exclusions(cfg, injections)
    logdoc = {"schema_version": 1, "seed": cfg.seed, "test_sensor": cfg.test_sensor,
              "exclusions": [[s, format_time(a), format_time(b)] for s, a, b in exclusions],
              "forecasters": {}, "detectors": {}}
    failed = []
    splits = {}
    for var, kind, variant in _forecast_jobs(cfg):
        if var not in splits:
            splits[var] = leave_one_out_split(frames, cfg.test_sensor, exclusions, target=var,
                                              train_stride=cfg.train["train_stride"],
                                              test_stride=10**9)
        split = splits[var]
        target_index = list(frames[cfg.test_sensor].variables).index(var)
        config = ForecastConfig(kind, proposed=variant == "proposed", target_index=target_index)
        name = _model_name(var, kind, variant)
        t0 = time.perf_counter()
        model, result, search = _fit_forecaster(cfg, config, split.train)
        entry = {"lr": result.lr, "lr_search": search, "best_epoch": result.best_epoch,
                 "best_val": result.best_val, "epochs": len(result.history), "diverged": result.diverged}
        logdoc["forecasters"][name] = entry
        log.info("%s: lr=%g best_val=%.5f epochs=%d (%.1fs)", name, result.lr, result.best_val,
                 len(result.history), time.perf_counter() - t0)
        if not np.isfinite(result.best_val):
            failed.append(name)
            continue
        save_checkpoint(model, model_dir / f"{name}.json", extra={"variable": var, **entry})

    split = next(iter(splits.values())) if splits else \
        leave_one_out_split(frames, cfg.test_sensor, exclusions, target=cfg.target)
    _write(model_dir / "standardizer.json", _dump(split.standardizer.to_dict()))
    train_frames = [split.standardizer.apply_frame(apply_exclusions(frames[s], exclusions))
                    for s in split.plan.train_sensors]
    for kind in cfg.detectors:
        t0 = time.perf_counter()
        dcfg = DetectorConfig(kind, variable=cfg.target)
        preset = cfg.detector_presets[kind]
        det, result, theta = fit_detector(dcfg, train_frames, cfg.seed, preset, percentile=cfg.percentile)
        entry = {**preset, "theta": theta, "best_val": result.best_val, "epochs_run": len(result.history),
                 "diverged": result.diverged}
        logdoc["detectors"][kind] = entry
        log.info("detector %s: lr=%g theta=%.4f (%.1fs)", kind, preset["lr"], theta, time.perf_counter() - t0)
        if not np.isfinite(result.best_val) or not np.isfinite(theta):
            failed.append(kind)
            continue
        save_detector(det, model_dir / f"detector_{kind}.json", extra=entry)
    _write(model_dir / "train_log.json", _dump(logdoc))
    if failed:
        log.error("training diverged for: %s", ", ".join(failed))
        return 1
    return 0


# -- eval --------------------------------------------------------------------

def cmd_eval(cfg: RunConfig) -> int:
    frames, _, injections = _load_data(cfg)
    names = [_model_name(cfg.target, k, v) for k in cfg.forecast_kinds for v in cfg.variants]
    models = {n: _load_forecaster(cfg, n)[0] for n in names}
    split = leave_one_out_split(frames, cfg.test_sensor, _exclusions(cfg, injections), target=cfg.target,
                                test_stride=cfg.train["test_stride"], train_stride=10**9)
    report = evaluate(models, split.test, split.standardizer, cfg.target)
    target_index = list(frames[cfg.test_sensor].variables).index(cfg.target)
    baseline = evaluate({"seasonal_naive": SeasonalNaive(target_index)}, split.test, split.standardizer,
                        cfg.target)
    out = _mkdir(cfg.path("report_dir"))
    doc = report.to_dict(include_runtime=False)
    doc.update(seed=cfg.seed, test_sensor=cfg.test_sensor,
               baseline=baseline.to_dict(include_runtime=False)["models"])
    _write(out / "eval.json", _dump(doc))
    _write(out / "eval_runtime.json", _dump({"schema_version": REPORT_VERSION, "seed": cfg.seed,
                                             "runtime_s": {n: r.runtime_s for n, r in report.rows.items()}}))
    report.rows.update(baseline.rows)
    _write(out / "eval.txt", report.to_text())
    sys.stdout.write(report.to_text())
    return 0


# -- detect ------------------------------------------------------------------

def _frame_series(frame, var):
    return frame.data[:, list(frame.variables).index(var)]


def cmd_detect(cfg: RunConfig) -> int:
    frames, _, injections = _load_data(cfg)
    stdz = _load_standardizer(cfg)
    frame = frames[cfg.test_sensor]
    raw = _frame_series(frame, cfg.target)
    values = stdz.apply(raw, cfg.target)
    out = _mkdir(cfg.path("report_dir"))
    plots = _mkdir(out / "plots")
    series, events, thresholds, leads, persistence = [], [], {}, [], []
    mine = [(i, inj) for i, (s, inj) in enumerate(injections) if s == cfg.test_sensor]
    for kind in cfg.detectors:
        det, extra = _load_det(cfg, kind)
        theta = float(extra["theta"])
        thr = cfg.level * theta
        sc = score(det, values, frame.start, name=kind)
        series.append(sc)
        events += detect(sc, theta, cfg.level)
        thresholds[kind] = {"theta": theta, "threshold": thr, "family": det.config.family}
        for i, inj in mine:
            if inj.kind == "do_crash":
                lt = lead_time(sc, thr, raw, frame.start, inj.start, inj.end, cfg.lookback_hours)
                leads.append({"detector": kind, "injection": i, **lt.to_dict()})
            else:
                inside = (sc.times - (SPAN - 1) * STEP >= inj.start) & (sc.times <= inj.end)
                frac = float((sc.mse[inside] > thr).mean()) if inside.any() else None
                persistence.append({"detector": kind, "injection": i, "fraction_above": frac,
                                    "windows": int(inside.sum())})
    write_scores_csv(series, out / "scores.csv")
    _write(out / "events.json", events_json(events, {
        "seed": cfg.seed, "level": cfg.level, "test_sensor": cfg.test_sensor, "thresholds": thresholds,
        "lead_times": leads, "persistence": persistence}) + "\n")
    for i, inj in mine:
        _write_plot(plots / f"{inj.kind}_{i}.csv", frame, raw, series, thresholds,
                    inj.start - np.timedelta64(48, "h"), inj.end + np.timedelta64(24, "h"))
    for row in leads:
        log.info("lead time %s: %s h", row["detector"], row["lead_hours"])
    return 0


def _write_plot(path, frame, raw, series, thresholds, t0, t1) -> None:
    """DO panel plus one MSE column and threshold column per detector."""
    times = frame.times
    keep = (times >= t0) & (times <= t1)
    cols = [f"{s.detector}_{c}" for s in series for c in ("mse", "threshold")]
    lookup = [dict(zip(s.times.tolist(), s.mse.tolist())) for s in series]
    lines = [",".join(["timestamp", "do"] + cols)]
    for t, v in zip(times[keep], raw[keep]):
        row = [format_time(t), "" if np.isnan(v) else repr(float(v))]
        for s, look in zip(series, lookup):
            m = look.get(t.astype("datetime64[s]").item())
            row += ["" if m is None else repr(m), repr(thresholds[s.detector]["threshold"])]
        lines.append(",".join(row))
    _write(path, "\n".join(lines) + "\n")


# -- pipeline ----------------------------------------------------------------

class Pipeline:
    """Models and settings for the simulated hourly deployment on one pond."""

    def __init__(self, cfg: RunConfig, frames: dict, stdz: Standardizer, forecasters: dict, det, theta: float):
        self.cfg, self.stdz, self.forecasters = cfg, stdz, forecasters
        self.det, self.theta = det, theta
        frame = frames[cfg.test_sensor]
        self.frame = frame
        self.variables = list(frame.variables)
        extremes = {}
        for var in cfg.gauge_variables:
            col = np.concatenate([_frame_series(f, var) for f in frames.values()])
            extremes[var] = (float(np.nanmin(col)), float(np.nanmax(col)))
        thresholds = {k: tuple(v) for k, v in cfg.gauge_thresholds.items() if k in cfg.gauge_variables}
        self.specs = default_specs(extremes, thresholds)
        self.need = max([m.config.in_len for m in forecasters.values()] + [det.config.window])

    def first_tick(self) -> np.datetime64:
        if self.cfg.pipeline_start:
            t = parse_time(self.cfg.pipeline_start)
        else:
            t = self.frame.start + (self.need - 1) * STEP
        # round up to the hour
        return t + (-(t - np.datetime64("1970-01-01T00:00:00", "s")) % np.timedelta64(1, "h"))

    def tick(self, t: np.datetime64) -> dict:
        """One hourly cycle using only samples stamped at or before ``t``.

        Raw readings are gap-imputed inside the causal slice, so a gap that
        is still open at ``t`` stays missing.
        """
        cfg, frame = self.cfg, self.frame
        idx = frame.index_of(t)
        stamp = format_time(t)
        if idx + 1 < self.need:
            return {**gauge_report(cfg.test_sensor, stamp, {}, self.specs), "status": "insufficient_history"}
        raw = frame.data[idx + 1 - self.need:idx + 1]
        data = np.column_stack([self.stdz.apply(impute_values(raw[:, j]), var)
                                for j, var in enumerate(self.variables)])
        exo = None
        if frame.exo is not None and not np.isnan(frame.exo[idx]).any():
            exo = self.stdz.apply(frame.exo[idx], FORECAST_VARIABLE)
        forecasts = {}
        for var, model in self.forecasters.items():
            hist = data[-model.config.in_len:]
            if np.isnan(hist).any() or (model.config.proposed and exo is None):
                continue
            forecasts[var] = self.stdz.invert(model.predict(hist, exo).mean, var)
        do = data[-self.det.config.window:, self.variables.index(cfg.target)]
        mse = None
        if not np.isnan(do).any():
            pred = self.det.predict(do[None, :self.det.config.context, None]).mean[0]
            mse = float(np.mean((pred - do[-SPAN:]) ** 2))
        report = gauge_report(cfg.test_sensor, stamp, forecasts, self.specs, cfg.gauge_weights,
                              mse, self.theta if mse is not None else None)
        report["status"] = "ok" if len(forecasts) == len(self.forecasters) and mse is not None else "partial"
        report["anomaly_mse"] = mse
        return report


def load_pipeline(cfg: RunConfig) -> Pipeline:
    frames, _, _ = _load_data(cfg, impute=False)
    stdz = _load_standardizer(cfg)
    forecasters = {var: _load_forecaster(cfg, _model_name(var, cfg.pipeline_kind, "proposed"))[0]
                   for var in cfg.gauge_variables}
    det, extra = _load_det(cfg, cfg.pipeline_detector)
    return Pipeline(cfg, frames, stdz, forecasters, det, float(extra["theta"]))


def cmd_pipeline(cfg: RunConfig) -> int:
    pipe = load_pipeline(cfg)
    t = pipe.first_tick()
    out = _mkdir(cfg.path("report_dir"))
    lines, spent = [], []
    for tick in range(cfg.ticks):
        if pipe.frame.index_of(t) >= len(pipe.frame.data):
            log.info("data exhausted after %d ticks", tick)
            break
        t0 = time.perf_counter()
        report = pipe.tick(t)
        spent.append(time.perf_counter() - t0)
        log.info("tick %d at %s: %.3fs", tick, format_time(t), spent[-1])
        lines.append(json.dumps({"schema_version": REPORT_VERSION, "seed": cfg.seed, "tick": tick, **report},
                                sort_keys=True))
        t = t + np.timedelta64(1, "h")
    _write(out / "pipeline.jsonl", "".join(line + "\n" for line in lines))
    if spent:
        log.info("%d ticks, mean %.3fs, max %.3fs per tick", len(spent), float(np.mean(spent)), max(spent))
    else:
        log.info("no ticks run")
    return 0


# -- entry point -------------------------------------------------------------

COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "detect": cmd_detect,
            "pipeline": cmd_pipeline}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="random seed (recorded in every report)")
    common.add_argument("--out", help="base directory for data, models and reports")
    common.add_argument("--level", type=float, help="anomaly level fraction for events (default 0.7)")
    common.add_argument("--ticks", type=int, help="hourly pipeline cycles to simulate")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    parser = argparse.ArgumentParser(prog="pondcast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"synth": "generate a synthetic pond dataset", "train": "fit forecasters and detectors",
             "eval": "score forecasters on the held-out sensor", "detect": "score detectors and extract events",
             "pipeline": "simulate the hourly gauge loop"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps.get(name))
    cfg_p = sub.add_parser("config", help="configuration helpers")
    cfg_sub = cfg_p.add_subparsers(dest="action", required=True)
    cfg_sub.add_parser("show", parents=[common], help="print the resolved configuration")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out, level=args.level, ticks=args.ticks)
        if args.command == "config":
            sys.stdout.write(cfg.to_json() + "\n")
            return 0
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except (ComputationError, ValueError, ArithmeticError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
