"""Lockdown effect estimates, weather comparisons, mixture coefficients and
hypothetical scenarios.

All percentage changes are computed from period totals (sums of daily
concentrations), never as means of daily ratios.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .features import EmptyDesign, FeatureError
from .gam import GamModel, design_for_model, linear_predictor
from .ingest import WEATHER_COLUMNS, DailySeries, StationMeta

QUANTILE_RULE = "linear interpolation (type 7)"
DEFAULT_MIXTURE_WINDOW = 14
MIN_MIXTURE_WINDOW = 7
_TIE_RTOL = 1e-12


class AnalysisError(ValueError):
    pass


class NoOverlap(AnalysisError):
    pass


class UnknownStation(AnalysisError):
    pass


def percent_change(new_total: float, base_total: float) -> float:
    """``100 * (new - base) / base``; NaN when the base total is not positive."""
    if not base_total > 0:
        return math.nan
    return 100.0 * (new_total - base_total) / base_total


def _as_date(d) -> date:
    return pd.Timestamp(d).date()


# -- reductions -------------------------------------------------------------------

@dataclass
class ReductionReport:
    label: str
    pollutant: str
    period: tuple[date, date]
    predicted_total: float
    measured_total: float
    n_days: int
    n_clamped: int = 0
    n_dropped: int = 0
    members: tuple[str, ...] = ()
    dates: pd.DatetimeIndex | None = field(default=None, repr=False, compare=False)
    predicted: np.ndarray | None = field(default=None, repr=False, compare=False)
    measured: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n_days < 1:
            raise AnalysisError("a reduction report needs at least one day")

    @property
    def percent_change(self) -> float:
        return percent_change(self.measured_total, self.predicted_total)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "pollutant": self.pollutant,
            "period": [self.period[0].isoformat(), self.period[1].isoformat()],
            "predicted_total": self.predicted_total,
            "measured_total": self.measured_total,
            "percent_change": self.percent_change,
            "n_days": self.n_days,
            "flags": {"clamped_predictions": self.n_clamped, "dropped_days": self.n_dropped},
            "members": list(self.members),
        }

    def daily_frame(self) -> pd.DataFrame:
        if self.dates is None:
            return pd.DataFrame(columns=["predicted", "measured"])
        return pd.DataFrame(
            {"predicted": self.predicted, "measured": self.measured},
            index=pd.DatetimeIndex(self.dates, name="date"),
        )


def _period_days(start: date, end: date) -> int:
    return (end - start).days + 1


def estimate_reduction(
    model: GamModel, measured: DailySeries, period: tuple[date, date], label: str | None = None
) -> ReductionReport:
    """Compare pre-lockdown model predictions with measurements over ``period``.

    Days where the response or any model feature is missing are dropped from
    both totals.  Raises :class:`NoOverlap` when no day remains.
    """
    start, end = _as_date(period[0]), _as_date(period[1])
    try:
        design = design_for_model(model, measured, start, end)
    except (EmptyDesign, FeatureError) as exc:
        raise NoOverlap(f"{measured.station_id}: no usable day in {start}..{end} ({exc})") from exc
    eta, clamped = linear_predictor(model, design.columns, n=len(design))
    pred = np.exp(eta)
    meas = design.measured
    return ReductionReport(
        label=label or measured.station_id,
        pollutant=model.target,
        period=(start, end),
        predicted_total=float(pred.sum()),
        measured_total=float(meas.sum()),
        n_days=len(design),
        n_clamped=int(clamped.sum()),
        n_dropped=_period_days(start, end) - len(design),
        members=(measured.station_id,),
        dates=design.dates,
        predicted=pred,
        measured=meas,
    )


def year_over_year_change(series: DailySeries, target: str, period: tuple[date, date]) -> dict:
    """Raw change of ``target`` against the same calendar window one year
    earlier, on days measured in both years.  Secondary statistic: it does
    not account for weather."""
    start, end = _as_date(period[0]), _as_date(period[1])
    cur = series.get(target)
    shifted = cur.copy()
    shifted.index = shifted.index + pd.DateOffset(years=1)
    shifted = shifted[~shifted.index.duplicated(keep="first")]
    window = pd.date_range(pd.Timestamp(start), pd.Timestamp(end), freq="D")
    now = cur.reindex(window)
    before = shifted.reindex(window)
    ok = now.notna() & before.notna()
    if not ok.any():
        raise NoOverlap(f"{series.station_id}: no day of {start}..{end} measured in both years")
    now_total, before_total = float(now[ok].sum()), float(before[ok].sum())
    return {
        "station_id": series.station_id,
        "pollutant": target,
        "period": [start.isoformat(), end.isoformat()],
        "current_total": now_total,
        "previous_year_total": before_total,
        "percent_change": percent_change(now_total, before_total),
        "n_days": int(ok.sum()),
        "baseline": "same calendar window one year earlier",
    }


# -- weather comparison --------------------------------------------------------------

def _summary(values: np.ndarray) -> dict:
    v = values[np.isfinite(values)]
    if len(v) == 0:
        return {"n": 0, "mean": None, "q25": None, "median": None, "q75": None}
    q25, q50, q75 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    return {"n": int(len(v)), "mean": float(v.mean()), "q25": float(q25), "median": float(q50), "q75": float(q75)}


def compare_weather(
    period_a: DailySeries, period_b: DailySeries, variables: Sequence[str] | None = None
) -> dict[str, dict]:
    """Per-variable mean and quartiles of two periods, paired by name.

    ``mean_difference`` is ``mean(b) - mean(a)``.  Quartiles use linear
    interpolation between order statistics.
    """
    if len(period_a.dates) == 0 or len(period_b.dates) == 0:
        raise AnalysisError("both periods must be non-empty")
    if variables is None:
        known = set(WEATHER_COLUMNS.values())
        variables = [v for v in period_a.fields if v in known and v in period_b.fields]
    out = {}
    for name in variables:
        a = _summary(period_a.get(name).to_numpy(dtype=float))
        b = _summary(period_b.get(name).to_numpy(dtype=float))
        diff = None if a["mean"] is None or b["mean"] is None else b["mean"] - a["mean"]
        out[name] = {"a": a, "b": b, "mean_difference": diff, "quantile_rule": QUANTILE_RULE}
    return out


# -- mixture coefficient ---------------------------------------------------------------

@dataclass(frozen=True)
class MixtureFit:
    alpha: float
    objective: float
    n_days: int
    n_breakpoints: int
    unconstrained_alpha: float | None
    examined_alphas: tuple[float, ...] = field(repr=False)
    examined_objectives: tuple[float, ...] = field(repr=False)

    def to_dict(self, certificate: bool = False) -> dict:
        d = {
            "alpha": self.alpha,
            "objective": self.objective,
            "n_days": self.n_days,
            "n_breakpoints": self.n_breakpoints,
            "unconstrained_alpha": self.unconstrained_alpha,
        }
        if certificate:
            d["examined_alphas"] = list(self.examined_alphas)
            d["examined_objectives"] = list(self.examined_objectives)
        return d


def mixture_objective(alpha, m_ld, m_pre, measured) -> np.ndarray:
    """Mean absolute deviation of the mixture ``alpha*m_ld + (1-alpha)*m_pre``
    from ``measured``, for a scalar or an array of ``alpha`` values."""
    a = np.atleast_1d(np.asarray(alpha, dtype=float))[:, None]
    resid = a * m_ld[None, :] + (1.0 - a) * m_pre[None, :] - measured[None, :]
    out = np.abs(resid).mean(axis=1)
    return out if np.ndim(alpha) else out[0]


def _valid_triplets(m_ld, m_pre, measured):
    m_ld, m_pre, measured = (np.asarray(v, dtype=float) for v in (m_ld, m_pre, measured))
    if not (m_ld.shape == m_pre.shape == measured.shape):
        raise AnalysisError("m_ld, m_pre and measured must have equal length")
    ok = np.isfinite(m_ld) & np.isfinite(m_pre) & np.isfinite(measured)
    return m_ld[ok], m_pre[ok], measured[ok]


def _weighted_median_low(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cum = np.cumsum(w)
    return float(v[np.searchsorted(cum, 0.5 * cum[-1] * (1.0 - 1e-15))])


def fit_mixture(m_ld, m_pre, measured) -> MixtureFit:
    """Exact minimizer over ``[0, 1]`` of the mean absolute deviation between
    the measurements and the LD/pre-LD prediction mixture.

    The objective is convex and piecewise linear in alpha with kinks at
    ``(m - m_pre) / (m_ld - m_pre)``, so its minimum over the interval is
    attained at an endpoint or at a kink inside it.  All of those are
    evaluated; the smallest alpha among the minimizers is returned.  The
    minimizer over the real line (smallest weighted median of the kinks,
    weights ``|m_ld - m_pre|``) is recorded as ``unconstrained_alpha``; it is
    ``None`` when the two predictions coincide on every day.
    """
    m_ld, m_pre, measured = _valid_triplets(m_ld, m_pre, measured)
    if len(measured) == 0:
        raise NoOverlap("no day with LD prediction, pre-LD prediction and measurement")
    gap = m_ld - m_pre
    moving = gap != 0
    kinks = (measured[moving] - m_pre[moving]) / gap[moving]
    inside = kinks[(kinks > 0.0) & (kinks < 1.0)]
    candidates = np.unique(np.concatenate([[0.0, 1.0], inside]))
    values = np.empty(len(candidates))
    chunk = max(1, 2_000_000 // max(1, len(measured)))
    for i in range(0, len(candidates), chunk):
        values[i : i + chunk] = mixture_objective(candidates[i : i + chunk], m_ld, m_pre, measured)
    best = values.min()
    pick = int(np.argmax(values <= best + _TIE_RTOL * max(1.0, abs(best))))
    unconstrained = _weighted_median_low(kinks, np.abs(gap[moving])) if moving.any() else None
    return MixtureFit(
        alpha=float(candidates[pick]),
        objective=float(values[pick]),
        n_days=int(len(measured)),
        n_breakpoints=int(len(candidates)),
        unconstrained_alpha=unconstrained,
        examined_alphas=tuple(float(c) for c in candidates),
        examined_objectives=tuple(float(v) for v in values),
    )


def mixture_over_time(
    dates, m_ld, m_pre, measured, window_days: int = DEFAULT_MIXTURE_WINDOW
) -> pd.DataFrame:
    """Rolling mixture coefficient over trailing calendar windows.

    A date gets a row when its window ``[d - window + 1, d]`` starts on or
    after the first date and holds at least one complete day.
    """
    if window_days < MIN_MIXTURE_WINDOW:
        raise AnalysisError(f"window must be at least {MIN_MIXTURE_WINDOW} days")
    idx = pd.DatetimeIndex(dates).normalize()
    frame = pd.DataFrame(
        {"m_ld": np.asarray(m_ld, float), "m_pre": np.asarray(m_pre, float), "measured": np.asarray(measured, float)},
        index=idx,
    ).sort_index()
    cols = ["alpha", "objective", "n_days", "unconstrained_alpha"]
    if len(frame) == 0:
        return pd.DataFrame(columns=cols, index=pd.DatetimeIndex([], name="date"))
    first = frame.index[0]
    span = pd.Timedelta(days=window_days - 1)
    rows, out_dates = [], []
    for d in frame.index:
        if d - span < first:
            continue
        win = frame.loc[d - span : d]
        try:
            mf = fit_mixture(win["m_ld"], win["m_pre"], win["measured"])
        except NoOverlap:
            continue
        out_dates.append(d)
        rows.append((mf.alpha, mf.objective, mf.n_days, mf.unconstrained_alpha))
    return pd.DataFrame(rows, columns=cols, index=pd.DatetimeIndex(out_dates, name="date"))


# -- scenarios ----------------------------------------------------------------------

@dataclass
class ScenarioReport:
    label: str
    pollutant: str
    year: int
    predicted_total: float
    measured_total: float
    n_days: int
    dropped_days: int
    monthly: list[dict]
    n_clamped: int = 0
    members: tuple[str, ...] = ()
    dates: pd.DatetimeIndex | None = field(default=None, repr=False, compare=False)
    predicted: np.ndarray | None = field(default=None, repr=False, compare=False)
    measured: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def hypothetical_reduction_percent(self) -> float:
        return percent_change(self.predicted_total, self.measured_total)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "pollutant": self.pollutant,
            "year": self.year,
            "predicted_total": self.predicted_total,
            "measured_total": self.measured_total,
            "hypothetical_reduction_percent": self.hypothetical_reduction_percent,
            "n_days": self.n_days,
            "dropped_days": self.dropped_days,
            "clamped_predictions": self.n_clamped,
            "monthly": self.monthly,
            "members": list(self.members),
        }


def _monthly(year: int, dates: pd.DatetimeIndex, pred: np.ndarray, meas: np.ndarray) -> list[dict]:
    months = dates.month.to_numpy() if len(dates) else np.array([], int)
    out = []
    for m in range(1, 13):
        sel = months == m
        p, y = float(pred[sel].sum()), float(meas[sel].sum())
        n_cal = pd.Period(year=year, month=m, freq="M").days_in_month
        out.append(
            {
                "month": m,
                "n_days": int(sel.sum()),
                "dropped_days": int(n_cal - sel.sum()),
                "predicted_total": p,
                "measured_total": y,
                "hypothetical_reduction_percent": percent_change(p, y),
            }
        )
    return out


def hypothetical_scenario(
    ld_model: GamModel, year_data: DailySeries, year: int, label: str | None = None
) -> ScenarioReport:
    """Run the lockdown model over the weather of a whole calendar year and
    compare with that year's measurements (totals-based).

    Days lacking a measurement or a model feature are dropped and counted.
    """
    start, end = date(year, 1, 1), date(year, 12, 31)
    try:
        design = design_for_model(ld_model, year_data, start, end)
    except (EmptyDesign, FeatureError) as exc:
        raise NoOverlap(f"{year_data.station_id}: no usable day in {year} ({exc})") from exc
    eta, clamped = linear_predictor(ld_model, design.columns, n=len(design))
    pred = np.exp(eta)
    meas = design.measured
    return ScenarioReport(
        label=label or year_data.station_id,
        pollutant=ld_model.target,
        year=year,
        predicted_total=float(pred.sum()),
        measured_total=float(meas.sum()),
        n_days=len(design),
        dropped_days=_period_days(start, end) - len(design),
        monthly=_monthly(year, design.dates, pred, meas),
        n_clamped=int(clamped.sum()),
        members=(year_data.station_id,),
        dates=design.dates,
        predicted=pred,
        measured=meas,
    )


# -- class aggregation ----------------------------------------------------------------

def _class_of(station_id: str, stations: Mapping[str, StationMeta]) -> str:
    try:
        return stations[station_id].class_label
    except KeyError:
        raise UnknownStation(f"no metadata for station {station_id!r}") from None


def _stations_by_id(stations) -> dict[str, StationMeta]:
    if isinstance(stations, Mapping):
        return dict(stations)
    return {s.station_id: s for s in stations}


def aggregate_by_class(
    reports: Sequence[ReductionReport], stations
) -> dict[str, ReductionReport]:
    """Pool station reports per station class by summing their totals."""
    meta = _stations_by_id(stations)
    groups: dict[str, list[ReductionReport]] = {}
    for r in reports:
        groups.setdefault(_class_of((r.members or (r.label,))[0], meta), []).append(r)
    out = {}
    for label in sorted(groups):
        members = groups[label]
        out[label] = ReductionReport(
            label=label,
            pollutant=members[0].pollutant,
            period=(min(m.period[0] for m in members), max(m.period[1] for m in members)),
            predicted_total=math.fsum(m.predicted_total for m in members),
            measured_total=math.fsum(m.measured_total for m in members),
            n_days=sum(m.n_days for m in members),
            n_clamped=sum(m.n_clamped for m in members),
            n_dropped=sum(m.n_dropped for m in members),
            members=tuple(s for m in members for s in m.members),
        )
    return out


def aggregate_scenarios_by_class(
    reports: Sequence[ScenarioReport], stations
) -> dict[str, ScenarioReport]:
    meta = _stations_by_id(stations)
    groups: dict[str, list[ScenarioReport]] = {}
    for r in reports:
        groups.setdefault(_class_of((r.members or (r.label,))[0], meta), []).append(r)
    out = {}
    for label in sorted(groups):
        members = groups[label]
        monthly = []
        for i in range(12):
            rows = [m.monthly[i] for m in members]
            p = math.fsum(r["predicted_total"] for r in rows)
            y = math.fsum(r["measured_total"] for r in rows)
            monthly.append(
                {
                    "month": i + 1,
                    "n_days": sum(r["n_days"] for r in rows),
                    "dropped_days": sum(r["dropped_days"] for r in rows),
                    "predicted_total": p,
                    "measured_total": y,
                    "hypothetical_reduction_percent": percent_change(p, y),
                }
            )
        out[label] = ScenarioReport(
            label=label,
            pollutant=members[0].pollutant,
            year=members[0].year,
            predicted_total=math.fsum(m.predicted_total for m in members),
            measured_total=math.fsum(m.measured_total for m in members),
            n_days=sum(m.n_days for m in members),
            dropped_days=sum(m.dropped_days for m in members),
            monthly=monthly,
            n_clamped=sum(m.n_clamped for m in members),
            members=tuple(s for m in members for s in m.members),
        )
    return out


# -- serialization helpers --------------------------------------------------------------

def reports_to_json(reports: Sequence) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1) + "\n"


def reduction_csv(reports: Sequence[ReductionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "pollutant", "start", "end", "n_days", "predicted_total",
                "measured_total", "percent_change", "clamped", "dropped"])
    for r in reports:
        w.writerow([r.label, r.pollutant, r.period[0].isoformat(), r.period[1].isoformat(), r.n_days,
                    repr(r.predicted_total), repr(r.measured_total), repr(r.percent_change),
                    r.n_clamped, r.n_dropped])
    return buf.getvalue()


def scenario_csv(reports: Sequence[ScenarioReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "pollutant", "year", "month", "n_days", "dropped_days",
                "predicted_total", "measured_total", "hypothetical_reduction_percent"])
    for r in reports:
        w.writerow([r.label, r.pollutant, r.year, "all", r.n_days, r.dropped_days,
                    repr(r.predicted_total), repr(r.measured_total), repr(r.hypothetical_reduction_percent)])
        for m in r.monthly:
            w.writerow([r.label, r.pollutant, r.year, m["month"], m["n_days"], m["dropped_days"],
                        repr(m["predicted_total"]), repr(m["measured_total"]),
                        repr(m["hypothetical_reduction_percent"])])
    return buf.getvalue()
