"""Temporal cross-validation, error metrics and a synthetic data generator."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .features import CATEGORICAL, PCA_INPUTS, DesignMatrix, FeatureSpec, build_design, fit_pca
from .gam import FitConfig, GamError, GamModel, fit, linear_predictor
from .ingest import DailySeries, daily_series_from_frame

PRE_LD_TRAIN_MONTHS = (3, 6, 9, 12, 18, 24)
LD_TEST_BLOCK_DAYS = 3


class EvaluationError(ValueError):
    pass


class LengthMismatch(EvaluationError):
    pass


class ZeroVariance(EvaluationError):
    pass


class PeriodTooShort(EvaluationError):
    pass


class InsufficientHistory(EvaluationError):
    pass


# -- metrics -------------------------------------------------------------------

def _pair(pred, meas) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float)
    m = np.asarray(meas, dtype=float)
    if p.shape != m.shape:
        raise LengthMismatch(f"{p.shape} vs {m.shape}")
    return p, m


def rmse(pred, meas) -> float:
    p, m = _pair(pred, meas)
    if p.size == 0:
        raise LengthMismatch("empty input")
    return float(np.sqrt(np.mean((p - m) ** 2)))


def r2(pred, meas) -> float:
    """``1 - SS_res / SS_tot`` about the mean of the measurements."""
    p, m = _pair(pred, meas)
    if p.size < 2:
        raise LengthMismatch("r2 needs at least two points")
    ss_tot = float(np.sum((m - m.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("measurements have zero variance")
    return 1.0 - float(np.sum((m - p) ** 2)) / ss_tot


# -- folds -----------------------------------------------------------------------

DateRange = tuple[date, date]


@dataclass(frozen=True)
class Fold:
    """Inclusive train ranges and one inclusive test range.

    Pre-lockdown folds have a single train range ending before the test
    range; lockdown folds train on the lockdown days outside the test block.
    """

    index: int
    train: tuple[DateRange, ...]
    test: DateRange
    train_months: int | None = None
    skip_reason: str | None = None

    def train_mask(self, dates: pd.DatetimeIndex) -> np.ndarray:
        mask = np.zeros(len(dates), dtype=bool)
        for lo, hi in self.train:
            mask |= (dates >= pd.Timestamp(lo)) & (dates <= pd.Timestamp(hi))
        return mask

    def test_mask(self, dates: pd.DatetimeIndex) -> np.ndarray:
        lo, hi = self.test
        return np.asarray((dates >= pd.Timestamp(lo)) & (dates <= pd.Timestamp(hi)))


def add_months(d: date, months: int) -> date:
    total = d.year * 12 + (d.month - 1) + months
    return date(total // 12, total % 12 + 1, 1)


def make_pre_ld_folds(
    eval_year: int,
    train_lengths: Sequence[int] = PRE_LD_TRAIN_MONTHS,
    data_start: date | None = None,
) -> list[Fold]:
    """Month-start cut-offs in ``eval_year`` crossed with train lengths.

    Each fold trains on the ``L`` months before the cut-off and tests on the
    following month.  Folds reaching back before ``data_start`` are kept in
    the list with ``skip_reason`` set.
    """
    folds = []
    for length in train_lengths:
        for month in range(1, 13):
            cut = date(eval_year, month, 1)
            train_start = add_months(cut, -length)
            test_end = add_months(cut, 1) - timedelta(days=1)
            reason = None
            if data_start is not None and train_start < data_start:
                reason = f"InsufficientHistory: needs data from {train_start.isoformat()}"
            folds.append(
                Fold(
                    len(folds),
                    ((train_start, cut - timedelta(days=1)),),
                    (cut, test_end),
                    length,
                    reason,
                )
            )
    return folds


def make_ld_folds(start: date, end: date, test_block: int = LD_TEST_BLOCK_DAYS) -> list[Fold]:
    """Consecutive ``test_block``-day test blocks tiling the lockdown period
    from its start; each fold trains on every other lockdown day.  A
    trailing partial block is dropped."""
    n_days = (end - start).days + 1
    n_blocks = n_days // test_block
    if n_blocks < 2:
        raise PeriodTooShort(f"{n_days} days hold fewer than two {test_block}-day blocks")
    folds = []
    for b in range(n_blocks):
        t0 = start + timedelta(days=b * test_block)
        t1 = t0 + timedelta(days=test_block - 1)
        train = []
        if t0 > start:
            train.append((start, t0 - timedelta(days=1)))
        if t1 < end:
            train.append((t1 + timedelta(days=1), end))
        folds.append(Fold(b, tuple(train), (t0, t1)))
    return folds


# -- reports ------------------------------------------------------------------------

@dataclass
class FoldResult:
    index: int
    train: tuple[DateRange, ...]
    test: DateRange
    train_months: int | None = None
    n_train: int = 0
    n_test: int = 0
    rmse: float | None = None
    r2: float | None = None
    skipped: str | None = None
    features: list[str] = field(default_factory=list)
    n_clamped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fold": self.index,
            "train": [[a.isoformat(), b.isoformat()] for a, b in self.train],
            "test": [self.test[0].isoformat(), self.test[1].isoformat()],
            "train_months": self.train_months,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "rmse": self.rmse,
            "r2": self.r2,
            "skipped": self.skipped,
            "features": self.features,
            "n_clamped": self.n_clamped,
            **self.extra,
        }


@dataclass
class CvReport:
    protocol: str
    station_id: str
    target: str
    folds: list[FoldResult]

    @property
    def used(self) -> list[FoldResult]:
        return [f for f in self.folds if f.skipped is None]

    @property
    def skipped(self) -> list[FoldResult]:
        return [f for f in self.folds if f.skipped is not None]

    def _stat(self, attr: str, fn: Callable) -> float | None:
        vals = [getattr(f, attr) for f in self.used if getattr(f, attr) is not None]
        return float(fn(vals)) if vals else None

    @property
    def mean_rmse(self) -> float | None:
        return self._stat("rmse", np.mean)

    @property
    def std_rmse(self) -> float | None:
        return self._stat("rmse", np.std)

    @property
    def mean_r2(self) -> float | None:
        return self._stat("r2", np.mean)

    @property
    def std_r2(self) -> float | None:
        return self._stat("r2", np.std)

    def by_train_length(self) -> dict[int, dict]:
        out: dict[int, dict] = {}
        for length in sorted({f.train_months for f in self.folds if f.train_months is not None}):
            sub = [f for f in self.used if f.train_months == length]
            rm = [f.rmse for f in sub]
            rr = [f.r2 for f in sub if f.r2 is not None]
            out[length] = {
                "n_folds": len(sub),
                "mean_rmse": float(np.mean(rm)) if rm else None,
                "std_rmse": float(np.std(rm)) if rm else None,
                "mean_r2": float(np.mean(rr)) if rr else None,
            }
        return out

    def to_dict(self) -> dict:
        d = {
            "protocol": self.protocol,
            "station_id": self.station_id,
            "target": self.target,
            "n_folds": len(self.folds),
            "n_used": len(self.used),
            "n_skipped": len(self.skipped),
            "mean_rmse": self.mean_rmse,
            "std_rmse": self.std_rmse,
            "mean_r2": self.mean_r2,
            "std_r2": self.std_r2,
            "folds": [f.to_dict() for f in self.folds],
        }
        if any(f.train_months is not None for f in self.folds):
            d["by_train_months"] = {str(k): v for k, v in self.by_train_length().items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra_keys = sorted({k for f in self.folds for k in f.extra})
        w.writerow(
            ["fold", "train_start", "train_end", "test_start", "test_end", "train_months",
             "n_train", "n_test", "rmse", "r2", "skipped"] + extra_keys
        )
        for f in self.folds:
            w.writerow(
                [f.index, f.train[0][0].isoformat() if f.train else "",
                 f.train[-1][1].isoformat() if f.train else "",
                 f.test[0].isoformat(), f.test[1].isoformat(),
                 "" if f.train_months is None else f.train_months,
                 f.n_train, f.n_test,
                 "" if f.rmse is None else repr(f.rmse),
                 "" if f.r2 is None else repr(f.r2),
                 f.skipped or ""]
                + ["" if f.extra.get(k) is None else repr(f.extra[k]) for k in extra_keys]
            )
        return buf.getvalue()


def score_model(model: GamModel, test: DesignMatrix) -> tuple[float, float | None, int]:
    """RMSE and R^2 on the concentration scale, plus the clamped-row count."""
    eta, clamped = linear_predictor(model, test.columns, n=len(test))
    pred = np.exp(eta)
    meas = test.measured
    try:
        fold_r2 = r2(pred, meas)
    except (ZeroVariance, LengthMismatch):
        fold_r2 = None
    return rmse(pred, meas), fold_r2, int(clamped.sum())


def _uses_pca(specs: Sequence[FeatureSpec]) -> bool:
    return any(s.source == "PCA" for s in specs)


def cross_validate(
    series: DailySeries,
    folds: Sequence[Fold],
    target: str,
    specs: Sequence[FeatureSpec] | None = None,
    candidates: Sequence[FeatureSpec] | None = None,
    config: FitConfig = FitConfig(),
    vif_threshold: float = 2.5,
    protocol: str = "pre_ld",
) -> CvReport:
    """Fit on each fold's train rows and score on its test rows.

    Pass fixed ``specs`` or a ``candidates`` pool; with candidates the
    forward selection (plus the weekday term) runs inside every fold, and
    categorical candidates with levels in the test block that the train
    rows lack are withheld for that fold.
    """
    from .selection import ensure_weekday, forward_select

    if (specs is None) == (candidates is None):
        raise ValueError("give exactly one of specs or candidates")
    pool = list(specs if specs is not None else candidates)
    shared_design = None
    results = []
    for fold in folds:
        res = FoldResult(fold.index, fold.train, fold.test, fold.train_months)
        results.append(res)
        if fold.skip_reason:
            res.skipped = fold.skip_reason
            continue
        try:
            if _uses_pca(pool):
                rows = np.column_stack([series.get(c).to_numpy() for c in PCA_INPUTS])
                pca = fit_pca(rows[fold.train_mask(series.dates)])
                design = build_design(series, target, pool, pca=pca)
            else:
                if shared_design is None:
                    shared_design = build_design(series, target, pool)
                design = shared_design
        except (ValueError, GamError) as exc:
            res.skipped = f"{type(exc).__name__}: {exc}"
            continue
        train = design.subset(fold.train_mask(design.dates))
        test = design.subset(fold.test_mask(design.dates))
        res.n_train, res.n_test = len(train), len(test)
        if len(test) == 0:
            res.skipped = "empty test data"
            continue
        if len(train) == 0:
            res.skipped = "empty train data"
            continue
        try:
            if specs is not None:
                model = fit(train, pool, config)
            else:
                usable = [s for s in pool if s.kind != CATEGORICAL or _levels_covered(train, test, s.name)]
                model, _ = forward_select(train, usable, config, vif_threshold)
                model = ensure_weekday(model, train, config)
            res.features = model.feature_names
            res.rmse, res.r2, res.n_clamped = score_model(model, test)
        except (ValueError, GamError, np.linalg.LinAlgError) as exc:
            res.skipped = f"{type(exc).__name__}: {exc}"
    return CvReport(protocol, series.station_id, target, results)


def _levels_covered(train: DesignMatrix, test: DesignMatrix, name: str) -> bool:
    return set(np.unique(test.columns[name])) <= set(np.unique(train.columns[name]))


# -- synthetic data --------------------------------------------------------------------

@dataclass(frozen=True)
class DriverSpec:
    """A weather-like driver: annual cycle plus AR(1) noise."""

    name: str
    mean: float = 0.0
    seasonal_amplitude: float = 0.0
    seasonal_phase_days: float = 0.0
    ar_coef: float = 0.7
    ar_sigma: float = 1.0
    lower: float | None = None
    upper: float | None = None
    wrap: float | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SmoothComponent:
    """A true additive effect on the log scale.

    ``sine``: ``amplitude * sin(2 pi (x - center) / period)``;
    ``linear``: ``amplitude * (x - center)``.
    """

    driver: str
    shape: str = "linear"
    amplitude: float = 1.0
    period: float = 1.0
    center: float = 0.0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.shape == "sine":
            return self.amplitude * np.sin(2.0 * np.pi * (x - self.center) / self.period)
        if self.shape == "linear":
            return self.amplitude * (x - self.center)
        raise ValueError(f"unknown smooth shape {self.shape!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def weather_drivers() -> tuple[DriverSpec, ...]:
    return (
        DriverSpec("T", 10.0, 9.0, 110.0, 0.8, 2.0),
        DriverSpec("RH", 72.0, -8.0, 110.0, 0.6, 7.0, lower=5.0, upper=100.0),
        DriverSpec("DP", 5.0, 7.0, 110.0, 0.8, 2.0),
        DriverSpec("P", -1.0, 0.5, 0.0, 0.3, 3.0, lower=0.0),
        DriverSpec("WS", 2.5, 0.4, 20.0, 0.5, 0.8, lower=0.2),
        DriverSpec("WD", 200.0, 0.0, 0.0, 0.5, 70.0, wrap=360.0),
        DriverSpec("pressure", 965.0, 0.0, 0.0, 0.8, 5.0),
    )


@dataclass(frozen=True)
class SynthConfig:
    n_days: int = 730
    start: date = date(2018, 1, 1)
    intercept: float = 3.0
    drivers: tuple[DriverSpec, ...] = field(default_factory=weather_drivers)
    smooths: tuple[SmoothComponent, ...] = (
        SmoothComponent("T", "sine", 0.5, 20.0),
        SmoothComponent("WS", "linear", -0.15, 1.0, 2.5),
    )
    weekday_multipliers: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 0.7, 0.7)
    sigma: float = 0.1
    seed: int = 0
    target: str = "NO2"
    station_id: str = "SYN"
    # (start, end, factor): multiply the concentration by ``factor`` inside the window
    lockdown: tuple[date, date, float] | None = None
    lockdown_weekday_multipliers: tuple[float, ...] | None = None
    # (name, source driver, noise sd): noisy copies of a driver
    duplicates: tuple[tuple[str, str, float], ...] = ()

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if len(self.weekday_multipliers) != 7 or min(self.weekday_multipliers) <= 0:
            raise ValueError("need 7 positive weekday multipliers")
        if self.lockdown_weekday_multipliers is not None and (
            len(self.lockdown_weekday_multipliers) != 7 or min(self.lockdown_weekday_multipliers) <= 0
        ):
            raise ValueError("need 7 positive lockdown weekday multipliers")


@dataclass
class GroundTruth:
    config: SynthConfig
    dates: pd.DatetimeIndex
    drivers: pd.DataFrame
    components: dict[str, np.ndarray]
    weekday_log: np.ndarray
    lockdown_log: np.ndarray
    noise: np.ndarray
    log_mean: np.ndarray

    def smooth(self, driver: str) -> SmoothComponent:
        for c in self.config.smooths:
            if c.driver == driver:
                return c
        raise KeyError(driver)


def generate_synthetic(config: SynthConfig) -> tuple[DailySeries, GroundTruth]:
    """Daily drivers and a log-normal response built from known components.

    ``ln Y = intercept + sum of smooths + ln(weekday multiplier)
    [+ ln(lockdown factor)] + Normal(0, sigma)``.  Deterministic in the seed.
    """
    rng = np.random.default_rng(config.seed)
    dates = pd.date_range(pd.Timestamp(config.start), periods=config.n_days, freq="D")
    doy = dates.dayofyear.to_numpy().astype(float)
    drivers = {}
    for spec in config.drivers:
        seasonal = spec.seasonal_amplitude * np.sin(2.0 * np.pi * (doy - spec.seasonal_phase_days) / 365.0)
        ar = np.zeros(config.n_days)
        if spec.ar_sigma > 0:
            eps = rng.normal(0.0, spec.ar_sigma, config.n_days)
            ar[0] = eps[0] / math.sqrt(max(1e-12, 1.0 - spec.ar_coef ** 2))
            for t in range(1, config.n_days):
                ar[t] = spec.ar_coef * ar[t - 1] + eps[t]
        x = spec.mean + seasonal + ar
        if spec.lower is not None or spec.upper is not None:
            x = np.clip(x, spec.lower, spec.upper)
        if spec.wrap is not None:
            x = np.mod(x, spec.wrap)
        drivers[spec.name] = x
    for name, source, sd in config.duplicates:
        drivers[name] = drivers[source] + rng.normal(0.0, sd, config.n_days)

    components = {c.driver: c(drivers[c.driver]) for c in config.smooths}
    weekday = dates.dayofweek.to_numpy()
    weekday_log = np.log(np.asarray(config.weekday_multipliers))[weekday]
    lockdown_log = np.zeros(config.n_days)
    if config.lockdown is not None:
        lo, hi, factor = config.lockdown
        inside = np.asarray((dates >= pd.Timestamp(lo)) & (dates <= pd.Timestamp(hi)))
        lockdown_log[inside] = math.log(factor)
        if config.lockdown_weekday_multipliers is not None:
            ld_week = np.log(np.asarray(config.lockdown_weekday_multipliers))[weekday]
            weekday_log = np.where(inside, ld_week, weekday_log)
    noise = rng.normal(0.0, config.sigma, config.n_days) if config.sigma > 0 else np.zeros(config.n_days)
    log_mean = config.intercept + weekday_log + lockdown_log
    for c in config.smooths:
        log_mean = log_mean + components[c.driver]
    y = np.exp(log_mean + noise)

    frame = pd.DataFrame(drivers, index=dates)
    frame[config.target] = y
    series = daily_series_from_frame(config.station_id, frame)
    truth = GroundTruth(
        config, dates, pd.DataFrame(drivers, index=dates), components, weekday_log,
        lockdown_log, noise, log_mean,
    )
    return series, truth
