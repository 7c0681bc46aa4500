"""Explanatory variables and per-station design matrices."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .ingest import DailySeries

SMOOTH = "smooth"
CATEGORICAL = "categorical"

PCA_INPUTS = ("P", "RH", "DP", "T")
WEATHER_SOURCES = ("WS", "WDx", "WDy", "T", "RH", "DP", "P", "PCA")
CALENDAR_SOURCES = ("M", "D")
ROLLING_SOURCES = ("WS", "PCA")
# Reference levels are the first entry.
CATEGORY_LEVELS = {"D": tuple(range(7)), "M": tuple(range(1, 13))}


class FeatureError(ValueError):
    pass


class DegenerateColumn(FeatureError):
    pass


class InsufficientData(FeatureError):
    pass


class EmptyDesign(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """One candidate explanatory variable.

    ``source`` is a base variable (``WS``, ``WDx``, ``WDy``, ``T``, ``RH``,
    ``DP``, ``P``, ``PCA``, ``DY``), a calendar category (``M``, ``D``), or the
    name of any other daily field, which enters as a smooth.
    """

    source: str
    lag_days: int = 0
    rolling_window_days: int = 0

    def __post_init__(self):
        if not self.source:
            raise FeatureError("empty source")
        if self.lag_days not in (0, 1, 2, 3):
            raise FeatureError(f"lag_days must be 0..3, got {self.lag_days}")
        if self.rolling_window_days not in (0, 7, 14):
            raise FeatureError(f"rolling window must be 0, 7 or 14, got {self.rolling_window_days}")
        if self.rolling_window_days and self.source not in ROLLING_SOURCES:
            raise FeatureError(f"rolling means apply only to {ROLLING_SOURCES}")
        if self.source in CALENDAR_SOURCES + ("DY",) and (self.lag_days or self.rolling_window_days):
            raise FeatureError("calendar variables take no lag or rolling window")

    @property
    def kind(self) -> str:
        return CATEGORICAL if self.source in CALENDAR_SOURCES else SMOOTH

    @property
    def name(self) -> str:
        name = self.source
        if self.rolling_window_days:
            name += f"_roll{self.rolling_window_days}"
        if self.lag_days:
            name += f"_lag{self.lag_days}"
        return name

    def to_dict(self) -> dict:
        return {"source": self.source, "lag": self.lag_days, "rolling": self.rolling_window_days}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        return cls(str(d["source"]), int(d.get("lag", 0)), int(d.get("rolling", 0)))


def default_candidates() -> list[FeatureSpec]:
    """The full candidate pool: weather variables with lags 0-3, weekly
    rolling means of WS and PCA, day of year, month and weekday."""
    specs = [FeatureSpec(src, lag) for src in WEATHER_SOURCES for lag in range(4)]
    specs += [FeatureSpec(src, 0, w) for src in ROLLING_SOURCES for w in (7, 14)]
    specs += [FeatureSpec("DY"), FeatureSpec("M"), FeatureSpec("D")]
    return specs


def wind_to_cartesian(wd):
    """Wind direction in degrees to its (sin, cos) components."""
    rad = np.asarray(wd, dtype=float) / 360.0 * 2.0 * np.pi
    wdx, wdy = np.sin(rad), np.cos(rad)
    if np.ndim(wd) == 0:
        return float(wdx), float(wdy)
    return wdx, wdy


@dataclass(frozen=True)
class PcaModel:
    means: tuple[float, float, float, float]
    scales: tuple[float, float, float, float]
    loading: tuple[float, float, float, float]
    explained_variance_ratio: float
    eigenvalue: float
    inputs: tuple[str, ...] = PCA_INPUTS

    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "means": list(self.means),
            "scales": list(self.scales),
            "loading": list(self.loading),
            "explained_variance_ratio": self.explained_variance_ratio,
            "eigenvalue": self.eigenvalue,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PcaModel":
        return cls(
            tuple(d["means"]),
            tuple(d["scales"]),
            tuple(d["loading"]),
            float(d["explained_variance_ratio"]),
            float(d["eigenvalue"]),
            tuple(d.get("inputs", PCA_INPUTS)),
        )


def fit_pca(rows) -> PcaModel:
    """First principal component of the correlation matrix of (P, RH, DP, T).

    Rows with any missing entry are ignored.  The loading is sign-fixed so
    that its temperature entry is non-negative.
    """
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2 or x.shape[1] != 4:
        raise FeatureError("PCA expects rows of (P, RH, DP, T)")
    x = x[np.isfinite(x).all(axis=1)]
    if len(x) < 5:
        raise InsufficientData(f"PCA needs at least 5 complete rows, got {len(x)}")
    means = x.mean(axis=0)
    scales = x.std(axis=0, ddof=1)
    if np.any(scales <= 1e-12 * np.maximum(1.0, np.abs(means))):
        bad = [PCA_INPUTS[i] for i in np.flatnonzero(scales <= 1e-12 * np.maximum(1.0, np.abs(means)))]
        raise DegenerateColumn(f"zero variance in {bad}")
    z = (x - means) / scales
    corr = z.T @ z / (len(z) - 1)
    evals, evecs = np.linalg.eigh(corr)
    top = evecs[:, -1]
    pivot = 3 if abs(top[3]) > 1e-12 else int(np.argmax(np.abs(top)))
    if top[pivot] < 0:
        top = -top
    top = top / np.linalg.norm(top)
    return PcaModel(
        tuple(float(v) for v in means),
        tuple(float(v) for v in scales),
        tuple(float(v) for v in top),
        float(evals[-1] / np.trace(corr)),
        float(evals[-1]),
    )


def apply_pca(model: PcaModel, row) -> float:
    r = np.asarray(row, dtype=float)
    return float(np.dot(model.loading, (r - np.asarray(model.means)) / np.asarray(model.scales)))


def pca_scores(model: PcaModel, rows) -> np.ndarray:
    x = np.asarray(rows, dtype=float)
    return ((x - np.asarray(model.means)) / np.asarray(model.scales)) @ np.asarray(model.loading)


def _full_calendar(series: pd.Series) -> pd.Series:
    if len(series) == 0:
        return series
    full = pd.date_range(series.index.min(), series.index.max(), freq="D")
    return series.reindex(full)


def lag(series, k: int):
    """Shift per-date values by ``k`` days; the first ``k`` dates become NaN.

    A ``pd.Series`` with a ``DatetimeIndex`` is shifted on the calendar (gaps
    respected); plain sequences are taken as consecutive days.
    """
    if k not in (1, 2, 3):
        raise FeatureError(f"lag must be 1, 2 or 3, got {k}")
    if isinstance(series, pd.Series) and isinstance(series.index, pd.DatetimeIndex):
        return _full_calendar(series).shift(k).reindex(series.index)
    arr = np.asarray(series, dtype=float)
    out = np.full_like(arr, np.nan)
    out[k:] = arr[:-k] if k < len(arr) else arr[:0]
    return out


def rolling_mean(series, window: int):
    """Trailing mean over ``[d - window + 1, d]``, NaN when fewer than
    ``window / 2`` values are present."""
    if window not in (7, 14):
        raise FeatureError(f"rolling window must be 7 or 14, got {window}")
    min_count = math.ceil(window / 2)
    if isinstance(series, pd.Series) and isinstance(series.index, pd.DatetimeIndex):
        full = _full_calendar(series)
        return full.rolling(window, min_periods=min_count).mean().reindex(series.index)
    s = pd.Series(np.asarray(series, dtype=float))
    return s.rolling(window, min_periods=min_count).mean().to_numpy()


def _base_variable(daily: DailySeries, source: str, pca: PcaModel | None) -> pd.Series:
    dates = daily.dates
    if source in ("WDx", "WDy"):
        wdx, wdy = wind_to_cartesian(daily.get("WD").to_numpy())
        return pd.Series(wdx if source == "WDx" else wdy, index=dates)
    if source == "PCA":
        rows = np.column_stack([daily.get(c).to_numpy() for c in PCA_INPUTS])
        return pd.Series(pca_scores(pca, rows), index=dates)
    if source == "DY":
        return pd.Series(dates.dayofyear.astype(float), index=dates)
    if source == "M":
        return pd.Series(dates.month.astype(float), index=dates)
    if source == "D":
        return pd.Series(dates.dayofweek.astype(float), index=dates)
    return daily.get(source).astype(float)


def _pca_training_rows(daily: DailySeries, start=None, end=None) -> np.ndarray:
    mask = np.ones(len(daily), dtype=bool)
    if start is not None:
        mask &= daily.dates >= pd.Timestamp(start)
    if end is not None:
        mask &= daily.dates <= pd.Timestamp(end)
    return np.column_stack([daily.get(c).to_numpy()[mask] for c in PCA_INPUTS])


def feature_frame(
    daily: DailySeries,
    specs: Sequence[FeatureSpec],
    pca: PcaModel | None = None,
) -> pd.DataFrame:
    """Feature values for every date of ``daily``; NaN where undefined."""
    if pca is None and any(s.source == "PCA" for s in specs):
        pca = fit_pca(_pca_training_rows(daily))
    cache: dict[str, pd.Series] = {}
    out = {}
    for spec in specs:
        if spec.source not in cache:
            cache[spec.source] = _base_variable(daily, spec.source, pca)
        s = cache[spec.source]
        if spec.rolling_window_days:
            s = rolling_mean(s, spec.rolling_window_days)
        if spec.lag_days:
            s = lag(s, spec.lag_days)
        out[spec.name] = s.to_numpy(dtype=float)
    return pd.DataFrame(out, index=daily.dates)


@dataclass
class DesignMatrix:
    station_id: str
    target: str
    dates: pd.DatetimeIndex
    response: np.ndarray
    columns: dict[str, np.ndarray]
    kinds: dict[str, str]
    dropped: dict[str, int] = field(default_factory=dict)
    pca: PcaModel | None = None

    def __len__(self) -> int:
        return len(self.response)

    @property
    def measured(self) -> np.ndarray:
        return np.exp(self.response)

    def subset(self, mask) -> "DesignMatrix":
        mask = np.asarray(mask, dtype=bool)
        return DesignMatrix(
            self.station_id,
            self.target,
            self.dates[mask],
            self.response[mask],
            {k: v[mask] for k, v in self.columns.items()},
            dict(self.kinds),
            dict(self.dropped),
            self.pca,
        )

    def between(self, start, end) -> "DesignMatrix":
        lo, hi = pd.Timestamp(start), pd.Timestamp(end)
        return self.subset((self.dates >= lo) & (self.dates <= hi))

    def to_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        names = list(self.columns)
        writer.writerow(["date", "response"] + names)
        for i, d in enumerate(self.dates):
            writer.writerow(
                [d.strftime("%Y-%m-%d"), repr(float(self.response[i]))]
                + [repr(float(self.columns[n][i])) for n in names]
            )


def build_design(
    daily: DailySeries,
    target: str,
    specs: Sequence[FeatureSpec],
    pca: PcaModel | None = None,
    start: date | None = None,
    end: date | None = None,
) -> DesignMatrix:
    """Assemble the log response and feature columns for ``target``.

    Features are computed on the whole series so lags and rolling means see
    the days before ``start``.  When a PCA feature is requested and no
    ``pca`` is given, it is fitted on the rows in ``[start, end]``.  Rows with
    a missing or nonpositive response or any missing feature are dropped and
    counted by reason.
    """
    if not specs:
        raise FeatureError("no feature specs given")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise FeatureError("duplicate feature names")
    if target not in daily.fields or daily.get(target).isna().all():
        raise EmptyDesign(f"{daily.station_id}: target {target} not measured")
    if pca is None and any(s.source == "PCA" for s in specs):
        pca = fit_pca(_pca_training_rows(daily, start, end))
    frame = feature_frame(daily, specs, pca)
    y = daily.get(target).to_numpy(dtype=float)

    window = np.ones(len(daily), dtype=bool)
    if start is not None:
        window &= daily.dates >= pd.Timestamp(start)
    if end is not None:
        window &= daily.dates <= pd.Timestamp(end)

    dropped = {"missing response": 0, "nonpositive response": 0, "missing feature": 0}
    missing_y = ~np.isfinite(y)
    nonpos = ~missing_y & (np.where(missing_y, 1.0, y) <= 0)
    feat_ok = np.isfinite(frame.to_numpy()).all(axis=1) if len(frame.columns) else np.ones(len(y), bool)
    dropped["missing response"] = int((window & missing_y).sum())
    dropped["nonpositive response"] = int((window & nonpos).sum())
    dropped["missing feature"] = int((window & ~missing_y & ~nonpos & ~feat_ok).sum())
    keep = window & ~missing_y & ~nonpos & feat_ok
    if not keep.any():
        raise EmptyDesign(f"{daily.station_id}: no complete rows for {target}")
    return DesignMatrix(
        station_id=daily.station_id,
        target=target,
        dates=daily.dates[keep],
        response=np.log(y[keep]),
        columns={n: frame[n].to_numpy()[keep] for n in names},
        kinds={s.name: s.kind for s in specs},
        dropped=dropped,
        pca=pca,
    )


def feature_columns(
    daily: DailySeries, specs: Iterable[FeatureSpec], pca: PcaModel | None
) -> tuple[pd.DatetimeIndex, dict[str, np.ndarray], np.ndarray]:
    """Feature columns for all dates plus a mask of fully populated rows."""
    specs = list(specs)
    frame = feature_frame(daily, specs, pca)
    ok = np.isfinite(frame.to_numpy()).all(axis=1) if specs else np.ones(len(daily), bool)
    return daily.dates, {c: frame[c].to_numpy() for c in frame.columns}, ok
