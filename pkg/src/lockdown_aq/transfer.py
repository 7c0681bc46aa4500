"""Lockdown models: refit intercept and weekday effects, keep everything else.

Weather and seasonal terms of the pre-lockdown model are carried over as a
fixed offset; only the intercept and the weekday coefficients are
re-estimated by ordinary least squares on the lockdown days.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from datetime import date

import numpy as np

from .evaluation import CvReport, FoldResult, make_ld_folds, score_model
from .features import CATEGORICAL, DesignMatrix, FeatureSpec
from .gam import (
    CategoricalTerm,
    GamError,
    GamModel,
    MissingFeature,
    aic_value,
    design_for_model,
    gaussian_loglik,
    linear_predictor,
    model_hash,
    term_contributions,
)
from .ingest import DailySeries

INTERCEPT = "intercept"
WEEKDAY = "weekday"
WEEKDAY_TERM = "D"
WEEKDAY_LEVELS = tuple(range(7))


class InsufficientCoverage(GamError):
    pass


@dataclass(frozen=True)
class TransferConfig:
    refit: tuple[str, ...] = (INTERCEPT, WEEKDAY)
    min_rows: int = 14
    min_per_weekday: int = 2

    def __post_init__(self):
        if not self.refit:
            raise ValueError("refit set must not be empty")
        unknown = set(self.refit) - {INTERCEPT, WEEKDAY}
        if unknown:
            raise ValueError(f"only intercept and weekday can be refit, got {sorted(unknown)}")

    def frozen(self, model: GamModel) -> list[str]:
        names = [s.name for s in model.specs]
        if WEEKDAY in self.refit:
            names = [n for n in names if n != WEEKDAY_TERM]
        if INTERCEPT not in self.refit:
            names = [INTERCEPT] + names
        return names


def _with_weekday(design: DesignMatrix) -> DesignMatrix:
    if WEEKDAY_TERM in design.columns:
        return design
    columns = dict(design.columns)
    columns[WEEKDAY_TERM] = design.dates.dayofweek.to_numpy().astype(float)
    return replace(design, columns=columns, kinds={**design.kinds, WEEKDAY_TERM: CATEGORICAL})


def transfer_fit(
    pre_ld: GamModel,
    ld_data: DesignMatrix,
    config: TransferConfig = TransferConfig(),
    period: tuple[date, date] | None = None,
) -> GamModel:
    """Derive a lockdown model from ``pre_ld`` using the rows of ``ld_data``."""
    n = len(ld_data)
    if n < config.min_rows:
        raise InsufficientCoverage(f"{n} lockdown rows, need {config.min_rows}")
    refit_weekday = WEEKDAY in config.refit
    refit_intercept = INTERCEPT in config.refit

    specs = list(pre_ld.specs)
    if refit_weekday and not pre_ld.has_term(WEEKDAY_TERM):
        specs.append(FeatureSpec(WEEKDAY_TERM))
    design = _with_weekday(ld_data) if refit_weekday else ld_data

    frozen_model = replace(pre_ld, specs=tuple(s for s in pre_ld.specs if not (refit_weekday and s.name == WEEKDAY_TERM)))
    contrib, _ = term_contributions(frozen_model, design.columns, n)
    offset = np.zeros(n)
    for name in frozen_model.feature_names:
        offset = offset + contrib[name]
    if not refit_intercept:
        offset = offset + pre_ld.intercept

    cols = []
    if refit_intercept:
        cols.append(np.ones(n))
    if refit_weekday:
        if WEEKDAY_TERM not in design.columns:
            raise MissingFeature("lockdown data lacks the weekday column")
        wd = np.asarray(design.columns[WEEKDAY_TERM], dtype=float)
        counts = {lv: int(np.sum(wd == lv)) for lv in WEEKDAY_LEVELS}
        short = [lv for lv, c in counts.items() if c < config.min_per_weekday]
        if short:
            raise InsufficientCoverage(
                f"weekday levels {short} have fewer than {config.min_per_weekday} lockdown rows"
            )
        for lv in WEEKDAY_LEVELS[1:]:
            cols.append((wd == lv).astype(float))
    X = np.column_stack(cols)
    target = design.response - offset
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    coef = [float(v) for v in coef]

    intercept = coef.pop(0) if refit_intercept else pre_ld.intercept
    categoricals = []
    for term in pre_ld.categoricals:
        if refit_weekday and term.name == WEEKDAY_TERM:
            continue
        categoricals.append(term)
    if refit_weekday:
        categoricals.append(CategoricalTerm(WEEKDAY_TERM, WEEKDAY_LEVELS, (0.0,) + tuple(coef), 6.0))
    by_name = {t.name: t for t in categoricals}
    ordered_cats = tuple(by_name[s.name] for s in specs if s.name in by_name)

    n_free = X.shape[1]
    draft = replace(
        pre_ld,
        intercept=intercept,
        categoricals=ordered_cats,
        specs=tuple(specs),
        fitted=None,
    )
    eta, _ = linear_predictor(draft, design.columns, n)
    resid = design.response - eta
    rss = float(resid @ resid)
    total_edf = 1.0 + sum(t.edf for t in draft.smooths) + sum(t.edf for t in draft.categoricals)
    ll = gaussian_loglik(rss, n)
    if period is None:
        period = (design.dates[0].date(), design.dates[-1].date())
    meta = dict(pre_ld.meta)
    meta.update(
        {
            "ld_rows": n,
            "ld_free_parameters": n_free,
            "ld_rss": rss,
            "train_start": design.dates[0].strftime("%Y-%m-%d"),
            "train_end": design.dates[-1].strftime("%Y-%m-%d"),
        }
    )
    return replace(
        draft,
        sigma2=rss / (n - n_free) if n > n_free else math.nan,
        n_train=n,
        total_edf=total_edf,
        log_likelihood=ll,
        aic=aic_value(total_edf, ll, pre_ld.aic_mode),
        meta=meta,
        transfer_provenance={
            "source_model_sha256": model_hash(pre_ld),
            "source_station_id": pre_ld.station_id,
            "ld_period": [period[0].isoformat(), period[1].isoformat()],
            "refit": list(config.refit),
            "frozen": config.frozen(pre_ld),
            "month_policy": "frozen",
        },
        fitted=eta,
    )


def ld_validate(
    pre_ld: GamModel,
    series: DailySeries,
    period: tuple[date, date],
    config: TransferConfig = TransferConfig(),
    test_block: int = 3,
) -> CvReport:
    """Leave-one-block-out validation of the transferred model over the
    lockdown period.  Each fold row also carries the pre-lockdown model's
    RMSE on the same test block."""
    start, end = period
    folds = make_ld_folds(start, end, test_block)
    design = _with_weekday(design_for_model(pre_ld, series, start, end))
    results = []
    for fold in folds:
        res = FoldResult(fold.index, fold.train, fold.test)
        results.append(res)
        train = design.subset(fold.train_mask(design.dates))
        test = design.subset(fold.test_mask(design.dates))
        res.n_train, res.n_test = len(train), len(test)
        if len(test) == 0:
            res.skipped = "empty test data"
            continue
        try:
            ld_model = transfer_fit(pre_ld, train, config, period)
            res.rmse, res.r2, res.n_clamped = score_model(ld_model, test)
            res.features = ld_model.feature_names
            res.extra["pre_ld_rmse"] = score_model(pre_ld, test)[0]
        except (ValueError, GamError) as exc:
            res.skipped = f"{type(exc).__name__}: {exc}"
    return CvReport("ld", series.station_id, pre_ld.target, results)
