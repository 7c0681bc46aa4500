"""Command-line front end.

Every command reads one JSON run configuration, works per station and
writes its outputs plus a ``manifest.json`` into ``<out>/<command>/``::

    lockdown-aq synth    --out run
    lockdown-aq fit      --config run/synth/config.json --out run
    lockdown-aq validate --config run/synth/config.json --out run --protocol pre-ld
    lockdown-aq reduce | transfer | mix | scenario  --config ... --out run

Exit codes: 0 success (including partial per-station failure), 2 bad
configuration or usage, 3 every station failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from . import __version__, plots
from .analysis import (
    aggregate_by_class,
    aggregate_scenarios_by_class,
    compare_weather,
    estimate_reduction,
    fit_mixture,
    hypothetical_scenario,
    mixture_over_time,
    reduction_csv,
    reports_to_json,
    scenario_csv,
    year_over_year_change,
)
from .evaluation import (
    DriverSpec,
    SmoothComponent,
    SynthConfig,
    cross_validate,
    generate_synthetic,
    make_pre_ld_folds,
)
from .features import FeatureSpec, build_design, default_candidates
from .gam import FitConfig, GamModel, design_for_model, from_json, linear_predictor, to_json
from .ingest import (
    POLLUTANT_COLUMNS,
    WEATHER_COLUMNS,
    DailySeries,
    StationMeta,
    aggregate_daily,
    parse_observations,
    parse_stations,
    slice_period,
)
from .selection import ensure_weekday, forward_select
from .transfer import TransferConfig, ld_validate, transfer_fit

log = logging.getLogger("lockdown_aq")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_FAILED = 3


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    def __init__(self, path: Path):
        super().__init__(f"missing artifact: {path}")
        self.path = path


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    return _sha256_bytes(Path(path).read_bytes())


def _parse_date(value, key: str) -> date:
    try:
        return date.fromisoformat(str(value))
    except ValueError:
        raise ConfigError(f"{key}: not an ISO date: {value!r}") from None


def _parse_period(block, key: str) -> tuple[date, date]:
    if not isinstance(block, Mapping) or "start" not in block or "end" not in block:
        raise ConfigError(f"{key} needs 'start' and 'end'")
    start, end = _parse_date(block["start"], key + ".start"), _parse_date(block["end"], key + ".end")
    if not start < end:
        raise ConfigError(f"{key}: start must be before end")
    return start, end


# -- configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    observations: Path
    stations: Path
    lockdown: tuple[date, date]
    target: str = "NO2"
    utc_offset_hours: float = 0.0
    coverage_threshold: float = 0.75
    candidates: list[FeatureSpec] = field(default_factory=default_candidates)
    fit: FitConfig = field(default_factory=FitConfig)
    vif_threshold: float = 2.5
    lockdowns: dict[str, tuple[date, date]] = field(default_factory=dict)
    train_years: int = 2
    evaluation_year: int | None = None
    scenario_year: int | None = None
    post_lockdown: tuple[date, date] | None = None
    mixture_window: int = 14
    cv_selection: bool = False
    seed: int = 0
    echo: dict = field(default_factory=dict)

    def period_for(self, station: StationMeta | None) -> tuple[date, date]:
        if station is not None and station.region in self.lockdowns:
            return self.lockdowns[station.region]
        return self.lockdown

    @classmethod
    def from_dict(cls, raw: Mapping, base_dir: Path = Path(".")) -> "RunConfig":
        raw = dict(raw)
        for key in ("observations", "stations", "lockdown"):
            if not raw.get(key):
                raise ConfigError(f"config needs a non-empty {key!r}")
        kw: dict = {
            "observations": (base_dir / raw["observations"]),
            "stations": (base_dir / raw["stations"]),
            "lockdown": _parse_period(raw["lockdown"], "lockdown"),
        }
        try:
            if "candidates" in raw and raw["candidates"] is not None:
                kw["candidates"] = [FeatureSpec.from_dict(c) for c in raw["candidates"]]
            if "fit" in raw:
                kw["fit"] = FitConfig.from_dict(raw["fit"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad feature or fit settings: {exc}") from None
        kw["lockdowns"] = {
            region: _parse_period(block, f"lockdowns.{region}")
            for region, block in (raw.get("lockdowns") or {}).items()
        }
        if raw.get("post_lockdown"):
            kw["post_lockdown"] = _parse_period(raw["post_lockdown"], "post_lockdown")
        simple = {
            "target": str,
            "utc_offset_hours": float,
            "coverage_threshold": float,
            "vif_threshold": float,
            "train_years": int,
            "evaluation_year": int,
            "scenario_year": int,
            "mixture_window": int,
            "cv_selection": bool,
            "seed": int,
        }
        for key, conv in simple.items():
            if raw.get(key) is not None:
                try:
                    kw[key] = conv(raw[key])
                except (TypeError, ValueError):
                    raise ConfigError(f"{key}: bad value {raw[key]!r}") from None
        if kw.get("target", "NO2") not in POLLUTANT_COLUMNS.values():
            raise ConfigError(f"unknown target pollutant {kw['target']!r}")
        if kw.get("mixture_window", 14) < 7:
            raise ConfigError("mixture_window must be at least 7 days")
        if kw.get("train_years", 2) < 1:
            raise ConfigError("train_years must be positive")
        kw["echo"] = raw
        return cls(**kw)


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw.pop("output_dir", None)
    if seed is not None:
        raw["seed"] = seed
    return RunConfig.from_dict(raw, path.parent)


# -- run bookkeeping ---------------------------------------------------------------

class Run:
    """Output directory of one command, tracking artifacts and timings."""

    def __init__(self, out: Path, command: str, config_echo: Mapping | None, seed: int):
        self.dir = Path(out) / command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config_echo = config_echo
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []
        self.stations: dict[str, dict] = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def write(self, name: str, content: str | bytes) -> Path:
        path = self.dir / name
        data = content.encode() if isinstance(content, str) else content
        path.write_bytes(data)
        self.artifacts.append(name)
        return path

    def add_file(self, name: str) -> None:
        self.artifacts.append(name)

    def add_input(self, label: str, path: Path) -> None:
        if not Path(path).is_file():
            raise MissingArtifact(Path(path))
        self.inputs[label] = _sha256_file(path)

    def ok(self, sid: str, **info) -> None:
        self.stations[sid] = {"status": "ok", **info}

    def failed(self, sid: str, exc: BaseException) -> None:
        self.stations[sid] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    def timed(self, step: str, fn: Callable, *args, **kw):
        t = time.perf_counter()
        try:
            return fn(*args, **kw)
        finally:
            self.timings[step] = self.timings.get(step, 0.0) + time.perf_counter() - t

    def finish(self) -> int:
        self.timings["total"] = time.perf_counter() - self._t0
        manifest = {
            "tool": "lockdown-aq",
            "version": __version__,
            "command": self.command,
            "seed": self.seed,
            "config": self.config_echo,
            "inputs": dict(sorted(self.inputs.items())),
            "stations": dict(sorted(self.stations.items())),
            "artifacts": {
                name: _sha256_file(self.dir / name) for name in sorted(set(self.artifacts))
            },
            "unhashed": ["timings.json"],
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        (self.dir / "timings.json").write_text(
            json.dumps({k: round(v, 6) for k, v in sorted(self.timings.items())}, indent=1) + "\n"
        )
        if self.stations and all(s["status"] != "ok" for s in self.stations.values()):
            return EXIT_ALL_FAILED
        return EXIT_OK


def _map_stations(fn: Callable, station_ids: list[str], jobs: int) -> list[tuple[str, object]]:
    """Apply ``fn`` per station with a bounded thread pool.  Results come back
    in ``station_ids`` order; exceptions are returned, not raised."""

    def guarded(sid):
        try:
            return sid, fn(sid)
        except Exception as exc:  # noqa: BLE001 - recorded per station
            log.debug("station %s failed", sid, exc_info=True)
            return sid, exc

    if jobs <= 1 or len(station_ids) <= 1:
        return [guarded(s) for s in station_ids]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(guarded, station_ids))


@dataclass
class Inputs:
    daily: dict[str, DailySeries]
    stations: dict[str, StationMeta]
    n_row_errors: int


def _read_inputs(cfg: RunConfig, run: Run) -> Inputs:
    for label, path in (("observations", cfg.observations), ("stations", cfg.stations)):
        if not path.is_file():
            raise ConfigError(f"{label} file not readable: {path}")
    run.add_input("observations", cfg.observations)
    run.add_input("stations", cfg.stations)
    try:
        with open(cfg.stations, newline="") as fh:
            stations = {s.station_id: s for s in parse_stations(fh)}
        with open(cfg.observations, newline="") as fh:
            obs, report = run.timed("ingest", parse_observations, fh)
    except ValueError as exc:
        raise ConfigError(f"cannot read inputs: {exc}") from None
    daily = run.timed("aggregate", aggregate_daily, obs, cfg.coverage_threshold, cfg.utc_offset_hours)
    return Inputs(daily, stations, len(report.row_errors))


def _station_ids(inputs: Inputs) -> list[str]:
    return sorted(inputs.daily)


def _model_path(directory: Path, sid: str) -> Path:
    return directory / f"{sid}.model.json"


def _load_model(directory: Path, sid: str, run: Run, label: str) -> GamModel:
    path = _model_path(directory, sid)
    if not path.is_file():
        raise MissingArtifact(path)
    run.inputs[f"{label}/{path.name}"] = _sha256_file(path)
    return from_json(path.read_text())


def _require_dir(path: Path) -> Path:
    if not path.is_dir():
        raise MissingArtifact(path)
    return path


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (date, pd.Timestamp)):
        return o.isoformat()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


# -- commands ----------------------------------------------------------------------

def cmd_fit(cfg: RunConfig, out: Path, jobs: int) -> int:
    run = Run(out, "fit", cfg.echo, cfg.seed)
    inputs = _read_inputs(cfg, run)

    def one(sid):
        series = inputs.daily[sid]
        ld_start, _ = cfg.period_for(inputs.stations.get(sid))
        start = (pd.Timestamp(ld_start) - pd.DateOffset(years=cfg.train_years)).date()
        end = ld_start - timedelta(days=1)
        design = build_design(series, cfg.target, cfg.candidates, start=start, end=end)
        model, trace = forward_select(design, cfg.candidates, cfg.fit, cfg.vif_threshold)
        model = ensure_weekday(model, design, cfg.fit)
        return model, trace

    results = run.timed("fit", _map_stations, one, _station_ids(inputs), jobs)
    for sid, res in results:
        if isinstance(res, Exception):
            run.failed(sid, res)
            continue
        model, trace = res
        run.write(f"{sid}.model.json", to_json(model))
        run.write(f"{sid}.trace.json", trace.to_json())
        run.write(f"{sid}.trace.txt", trace.table())
        run.ok(sid, features=model.feature_names, aic=model.aic, n_train=model.n_train)
        print(f"{sid}: {', '.join(model.feature_names)} (AIC {model.aic:.2f})")
    return run.finish()


def cmd_validate(cfg: RunConfig, out: Path, jobs: int, protocol: str) -> int:
    name = "validate_" + protocol.replace("-", "_")
    run = Run(out, name, cfg.echo, cfg.seed)
    inputs = _read_inputs(cfg, run)
    models_dir = _require_dir(out / "fit")

    def one(sid):
        series = inputs.daily[sid]
        model = _load_model(models_dir, sid, run, "fit")
        period = cfg.period_for(inputs.stations.get(sid))
        if protocol == "ld":
            return ld_validate(model, series, period)
        year = cfg.evaluation_year or period[0].year - 1
        folds = make_pre_ld_folds(year, data_start=series.dates[0].date())
        if cfg.cv_selection:
            return cross_validate(series, folds, cfg.target, candidates=cfg.candidates,
                                  config=cfg.fit, vif_threshold=cfg.vif_threshold)
        return cross_validate(series, folds, cfg.target, specs=list(model.specs), config=cfg.fit)

    results = run.timed("validate", _map_stations, one, _station_ids(inputs), jobs)
    summary = {}
    for sid, res in results:
        if isinstance(res, Exception):
            run.failed(sid, res)
            continue
        run.write(f"{sid}.cv.json", res.to_json())
        run.write(f"{sid}.cv.csv", res.to_csv())
        if protocol == "pre-ld":
            plots.rmse_by_train_length(run.dir / f"{sid}.cv.svg", res.by_train_length(), f"{sid} {cfg.target}")
            run.add_file(f"{sid}.cv.svg")
        entry = {
            "folds": len(res.folds),
            "used": len(res.used),
            "skipped": len(res.skipped),
            "mean_rmse": res.mean_rmse,
            "std_rmse": res.std_rmse,
            "mean_r2": res.mean_r2,
        }
        if protocol == "ld":
            pre = [f.extra.get("pre_ld_rmse") for f in res.used if f.extra.get("pre_ld_rmse") is not None]
            entry["pre_ld_mean_rmse"] = float(np.mean(pre)) if pre else None
        summary[sid] = entry
        run.ok(sid, folds=len(res.folds), used=len(res.used))
        print(f"{sid}: {len(res.used)}/{len(res.folds)} folds, RMSE {res.mean_rmse}")
    run.write("summary.json", _json({"protocol": protocol, "target": cfg.target, "stations": summary}))
    return run.finish()


def cmd_reduce(cfg: RunConfig, out: Path, jobs: int) -> int:
    run = Run(out, "reduce", cfg.echo, cfg.seed)
    inputs = _read_inputs(cfg, run)
    models_dir = _require_dir(out / "fit")

    def one(sid):
        series = inputs.daily[sid]
        model = _load_model(models_dir, sid, run, "fit")
        period = cfg.period_for(inputs.stations.get(sid))
        report = estimate_reduction(model, series, period)
        extras = {}
        try:
            extras["year_over_year"] = year_over_year_change(series, cfg.target, period)
        except ValueError as exc:
            extras["year_over_year"] = {"error": str(exc)}
        prev = tuple((pd.Timestamp(d) - pd.DateOffset(years=1)).date() for d in period)
        extras["weather"] = compare_weather(slice_period(series, *prev), slice_period(series, *period))
        return report, extras

    results = run.timed("reduce", _map_stations, one, _station_ids(inputs), jobs)
    reports, extras = [], {}
    for sid, res in results:
        if isinstance(res, Exception):
            run.failed(sid, res)
            continue
        report, extra = res
        reports.append(report)
        extras[sid] = extra
        frame = report.daily_frame()
        plots.series_overlay(
            run.dir / f"{sid}.svg", frame.index,
            {"measured": frame["measured"], "pre-LD": frame["predicted"]},
            f"{sid} {cfg.target}: measured vs pre-LD prediction",
        )
        run.add_file(f"{sid}.svg")
        run.ok(sid, percent_change=_finite(report.percent_change))
        print(f"{sid}: {report.percent_change:+.1f}% over {report.n_days} days")
    if reports:
        run.write("stations.report.json", reports_to_json(reports))
        run.write("stations.report.csv", reduction_csv(reports))
        run.write("weather.report.json", _json(extras))
        known = [r for r in reports if r.label in inputs.stations]
        classes = aggregate_by_class(known, inputs.stations)
        run.write("classes.report.json", reports_to_json(list(classes.values())))
        run.write("classes.report.csv", reduction_csv(list(classes.values())))
    return run.finish()


def _ld_series(model: GamModel, series: DailySeries, start: date, end: date):
    design = design_for_model(model, series, start, end)
    eta, _ = linear_predictor(model, design.columns, n=len(design))
    return design, np.exp(eta)


def cmd_transfer(cfg: RunConfig, out: Path, jobs: int) -> int:
    run = Run(out, "transfer", cfg.echo, cfg.seed)
    inputs = _read_inputs(cfg, run)
    models_dir = _require_dir(out / "fit")
    tcfg = TransferConfig()

    def one(sid):
        series = inputs.daily[sid]
        pre = _load_model(models_dir, sid, run, "fit")
        period = cfg.period_for(inputs.stations.get(sid))
        design = design_for_model(pre, series, *period)
        return pre, transfer_fit(pre, design, tcfg, period), period

    results = run.timed("transfer", _map_stations, one, _station_ids(inputs), jobs)
    summary = {}
    for sid, res in results:
        if isinstance(res, Exception):
            run.failed(sid, res)
            continue
        pre, ld, period = res
        run.write(f"{sid}.model.json", to_json(ld))
        design, pred_ld = _ld_series(ld, inputs.daily[sid], *period)
        pred_pre = np.exp(linear_predictor(pre, design.columns, n=len(design))[0])
        plots.series_overlay(
            run.dir / f"{sid}.svg", design.dates,
            {"measured": design.measured, "pre-LD": pred_pre, "LD": pred_ld},
            f"{sid} {cfg.target}: lockdown period",
        )
        run.add_file(f"{sid}.svg")
        summary[sid] = {
            "period": [period[0].isoformat(), period[1].isoformat()],
            "intercept_pre_ld": pre.intercept,
            "intercept_ld": ld.intercept,
            "intercept_shift": ld.intercept - pre.intercept,
            "weekday_ld": list(ld.terms["D"].coefficients),
            "weekday_pre_ld": list(pre.terms["D"].coefficients) if pre.has_term("D") else None,
            "n_days": ld.n_train,
            "sigma2": ld.sigma2,
            "frozen": ld.transfer_provenance["frozen"],
        }
        run.ok(sid, intercept_shift=ld.intercept - pre.intercept)
        print(f"{sid}: intercept shift {ld.intercept - pre.intercept:+.4f}")
    run.write("transfer.report.json", _json(summary))
    return run.finish()


def cmd_mix(cfg: RunConfig, out: Path, jobs: int) -> int:
    run = Run(out, "mix", cfg.echo, cfg.seed)
    inputs = _read_inputs(cfg, run)
    pre_dir, ld_dir = _require_dir(out / "fit"), _require_dir(out / "transfer")

    def one(sid):
        series = inputs.daily[sid]
        pre = _load_model(pre_dir, sid, run, "fit")
        ld = _load_model(ld_dir, sid, run, "transfer")
        ld_period = cfg.period_for(inputs.stations.get(sid))
        if cfg.post_lockdown is not None:
            start, end = cfg.post_lockdown
        else:
            start, end = ld_period[1] + timedelta(days=1), series.dates[-1].date()
        design, m_ld = _ld_series(ld, series, start, end)
        m_pre = np.exp(linear_predictor(pre, design.columns, n=len(design))[0])
        whole = fit_mixture(m_ld, m_pre, design.measured)
        rolling = mixture_over_time(design.dates, m_ld, m_pre, design.measured, cfg.mixture_window)
        return design, m_ld, m_pre, whole, rolling, (start, end)

    results = run.timed("mix", _map_stations, one, _station_ids(inputs), jobs)
    rows = {}
    for sid, res in results:
        if isinstance(res, Exception):
            run.failed(sid, res)
            continue
        design, m_ld, m_pre, whole, rolling, period = res
        rows[sid] = {**whole.to_dict(), "period": [period[0].isoformat(), period[1].isoformat()],
                     "window_days": cfg.mixture_window}
        buf = io.StringIO()
        rolling.to_csv(buf, date_format="%Y-%m-%d", float_format="%.17g", lineterminator="\n")
        run.write(f"{sid}.alpha.csv", buf.getvalue())
        plots.alpha_series(run.dir / f"{sid}.alpha.svg", rolling["alpha"],
                           f"{sid} {cfg.target}: LD model weight, {cfg.mixture_window}-day window")
        plots.series_overlay(
            run.dir / f"{sid}.svg", design.dates,
            {"measured": design.measured, "pre-LD": m_pre, "LD": m_ld},
            f"{sid} {cfg.target}: after lockdown",
        )
        run.add_file(f"{sid}.alpha.svg")
        run.add_file(f"{sid}.svg")
        run.ok(sid, alpha=whole.alpha)
        print(f"{sid}: alpha {whole.alpha:.4f} over {whole.n_days} days")
    run.write("mix.report.json", _json(rows))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["station_id", "start", "end", "n_days", "alpha", "objective", "unconstrained_alpha"])
    for sid, r in rows.items():
        w.writerow([sid, r["period"][0], r["period"][1], r["n_days"], repr(r["alpha"]),
                    repr(r["objective"]), "" if r["unconstrained_alpha"] is None else repr(r["unconstrained_alpha"])])
    run.write("mix.report.csv", buf.getvalue())
    return run.finish()


def cmd_scenario(cfg: RunConfig, out: Path, jobs: int) -> int:
    run = Run(out, "scenario", cfg.echo, cfg.seed)
    inputs = _read_inputs(cfg, run)
    ld_dir = _require_dir(out / "transfer")

    def one(sid):
        ld = _load_model(ld_dir, sid, run, "transfer")
        year = cfg.scenario_year or cfg.period_for(inputs.stations.get(sid))[0].year - 1
        return hypothetical_scenario(ld, inputs.daily[sid], year)

    results = run.timed("scenario", _map_stations, one, _station_ids(inputs), jobs)
    reports = []
    for sid, res in results:
        if isinstance(res, Exception):
            run.failed(sid, res)
            continue
        reports.append(res)
        plots.series_overlay(
            run.dir / f"{sid}.svg", res.dates, {"measured": res.measured, "LD": res.predicted},
            f"{sid} {cfg.target}: LD model over {res.year}",
        )
        run.add_file(f"{sid}.svg")
        run.ok(sid, hypothetical_reduction_percent=_finite(res.hypothetical_reduction_percent))
        print(f"{sid}: hypothetical {res.hypothetical_reduction_percent:+.1f}% in {res.year}")
    if reports:
        run.write("scenario.report.json", reports_to_json(reports))
        run.write("scenario.report.csv", scenario_csv(reports))
        known = [r for r in reports if r.label in inputs.stations]
        classes = list(aggregate_scenarios_by_class(known, inputs.stations).values())
        run.write("classes.report.json", reports_to_json(classes))
        run.write("classes.report.csv", scenario_csv(classes))
    return run.finish()


# -- synthetic data ---------------------------------------------------------------------

DEFAULT_SYNTH = {
    "start": "2017-01-01",
    "end": "2020-12-31",
    "sigma": 0.1,
    "intercept": 3.0,
    "target": "NO2",
    "weekday_multipliers": [1.0, 1.0, 1.0, 1.0, 1.0, 0.7, 0.7],
    "lockdown": {"start": "2020-03-16", "end": "2020-04-26", "factor": 0.7},
    "stations": [{"station_id": "SYN", "region": "Synthetic", "class_label": "Urban"}],
}


def _synth_config(block: Mapping, index: int, station: Mapping, seed: int) -> SynthConfig:
    start = _parse_date(block["start"], "synth.start")
    end = _parse_date(block["end"], "synth.end")
    kw = {}
    if block.get("smooths"):
        kw["smooths"] = tuple(SmoothComponent(**s) for s in block["smooths"])
    if block.get("drivers"):
        kw["drivers"] = tuple(DriverSpec(**d) for d in block["drivers"])
    ld = block.get("lockdown")
    if ld:
        kw["lockdown"] = (_parse_date(ld["start"], "synth.lockdown.start"),
                          _parse_date(ld["end"], "synth.lockdown.end"), float(ld["factor"]))
    if block.get("lockdown_weekday_multipliers"):
        kw["lockdown_weekday_multipliers"] = tuple(float(v) for v in block["lockdown_weekday_multipliers"])
    return SynthConfig(
        n_days=(end - start).days + 1,
        start=start,
        intercept=float(station.get("intercept", block["intercept"])),
        weekday_multipliers=tuple(float(v) for v in block["weekday_multipliers"]),
        sigma=float(block["sigma"]),
        seed=seed + index,
        target=block["target"],
        station_id=station["station_id"],
        **kw,
    )


def _hourly_rows(series: DailySeries, target: str) -> list[list[str]]:
    codes = {v: k for k, v in {**POLLUTANT_COLUMNS, **WEATHER_COLUMNS}.items()}
    header_codes = list(POLLUTANT_COLUMNS) + list(WEATHER_COLUMNS)
    values = series.values
    rows = []
    for ts, rec in zip(values.index, values.itertuples(index=False)):
        cells = dict(zip(values.columns, rec))
        by_code = {codes[k]: repr(float(v)) for k, v in cells.items() if k in codes and np.isfinite(v)}
        tail = [by_code.get(c, "") for c in header_codes] + [""]
        day = ts.strftime("%Y-%m-%d")
        for h in range(24):
            rows.append([series.station_id, f"{day}T{h:02d}:00:00Z"] + tail)
    return rows


def cmd_synth(raw_cfg: Mapping | None, out: Path, seed: int) -> int:
    """Synthetic hourly observations, station metadata and a ready-to-run
    configuration pointing at them."""
    block = dict(DEFAULT_SYNTH)
    block.update((raw_cfg or {}).get("synth", {}))
    echo = {"synth": block}
    run = Run(out, "synth", echo, seed)
    try:
        configs = [_synth_config(block, i, st, seed) for i, st in enumerate(block["stations"])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad synth settings: {exc}") from None

    obs = io.StringIO()
    w = csv.writer(obs, lineterminator="\n")
    w.writerow(["station_id", "timestamp"] + list(POLLUTANT_COLUMNS) + list(WEATHER_COLUMNS) + ["situation"])
    truth = {}
    for sc in configs:
        series, gt = generate_synthetic(sc)
        w.writerows(_hourly_rows(series, sc.target))
        truth[sc.station_id] = {
            "seed": sc.seed,
            "intercept": sc.intercept,
            "sigma": sc.sigma,
            "smooths": [c.to_dict() for c in sc.smooths],
            "weekday_multipliers": list(sc.weekday_multipliers),
            "lockdown": None if sc.lockdown is None else
            [sc.lockdown[0].isoformat(), sc.lockdown[1].isoformat(), sc.lockdown[2]],
            "lockdown_weekday_multipliers": None if sc.lockdown_weekday_multipliers is None
            else list(sc.lockdown_weekday_multipliers),
        }
        run.ok(sc.station_id, n_days=sc.n_days)
    run.write("observations.csv", obs.getvalue())

    st = io.StringIO()
    w = csv.writer(st, lineterminator="\n")
    w.writerow(["station_id", "region", "class_label", "lat", "lon"])
    for s in block["stations"]:
        w.writerow([s["station_id"], s.get("region", "Synthetic"), s.get("class_label", "Urban"), "", ""])
    run.write("stations.csv", st.getvalue())
    run.write("truth.json", _json(truth))

    ld = block.get("lockdown") or {}
    run_config = {
        "observations": "observations.csv",
        "stations": "stations.csv",
        "target": block["target"],
        "utc_offset_hours": 0.0,
        "seed": seed,
    }
    if ld:
        run_config["lockdown"] = {"start": ld["start"], "end": ld["end"]}
    run.write("config.json", _json(run_config))
    print(f"wrote {len(configs)} synthetic station(s) to {run.dir}")
    return run.finish()


# -- entry point ---------------------------------------------------------------------

def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--out", default=d(None), help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, default=d(None), help="override the configured seed")
    p.add_argument("--jobs", type=int, default=d(None), help="worker threads (default: CPU count)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lockdown-aq", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "write a synthetic dataset and matching config"),
        ("fit", "select and fit pre-lockdown models"),
        ("validate", "cross-validate models"),
        ("reduce", "estimate lockdown reductions"),
        ("transfer", "derive lockdown models"),
        ("mix", "fit the post-lockdown mixture coefficient"),
        ("scenario", "run lockdown models over a whole year"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_globals(p, suppress=True)
        if name == "validate":
            p.add_argument("--protocol", required=True, choices=["pre-ld", "ld"])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    if jobs < 1:
        print("error: --jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path("out")
    try:
        if args.command == "synth":
            raw = None
            if args.config:
                try:
                    raw = json.loads(Path(args.config).read_text())
                except (OSError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"cannot read config: {exc}") from None
            seed = args.seed if args.seed is not None else int((raw or {}).get("seed", 0))
            return cmd_synth(raw, out, seed)
        if not args.config:
            raise ConfigError(f"{args.command} needs --config")
        cfg = load_config(args.config, args.seed)
        if args.command == "fit":
            return cmd_fit(cfg, out, jobs)
        if args.command == "validate":
            return cmd_validate(cfg, out, jobs, args.protocol)
        commands = {"reduce": cmd_reduce, "transfer": cmd_transfer, "mix": cmd_mix, "scenario": cmd_scenario}
        return commands[args.command](cfg, out, jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED


if __name__ == "__main__":
    sys.exit(main())
