"""Forward variable selection by AIC with a variance-inflation gate."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .features import CATEGORICAL, DesignMatrix, FeatureSpec
from .gam import FitConfig, GamError, GamModel, fit

DEFAULT_VIF_THRESHOLD = 2.5
AIC_TIE = 1e-9
WEEKDAY = FeatureSpec("D")


class SelectionError(ValueError):
    pass


class DegenerateCandidate(SelectionError):
    pass


class NoViableModel(SelectionError):
    pass


def vif(candidate, included: Sequence) -> float:
    """Variance inflation factor ``1 / (1 - R^2)`` of ``candidate`` regressed
    (with intercept) on the ``included`` columns.  Returns ``inf`` for
    perfect collinearity."""
    y = np.asarray(candidate, dtype=float)
    yc = y - y.mean()
    sst = float(yc @ yc)
    if sst <= 1e-12 * max(1.0, float(y @ y)):
        raise DegenerateCandidate("candidate has zero variance")
    if len(included) == 0:
        return 1.0
    X = np.column_stack([np.ones(len(y))] + [np.asarray(c, dtype=float) for c in included])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    r2 = 1.0 - float(resid @ resid) / sst
    if r2 >= 1.0 - 1e-12:
        return math.inf
    return 1.0 / (1.0 - r2)


@dataclass
class CandidateOutcome:
    name: str
    vif: float | None = None
    rejected: bool = False
    aic: float | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vif": self.vif,
            "rejected": self.rejected,
            "aic": self.aic,
            "error": self.error,
        }


@dataclass
class SelectionStep:
    index: int
    outcomes: list[CandidateOutcome]
    chosen: str | None
    aic_after: float

    @property
    def is_stop(self) -> bool:
        return self.chosen is None

    def to_dict(self) -> dict:
        return {
            "step": self.index,
            "chosen": self.chosen,
            "aic_after": self.aic_after,
            "candidates": [o.to_dict() for o in self.outcomes],
        }


@dataclass
class SelectionTrace:
    steps: list[SelectionStep] = field(default_factory=list)
    aic_mode: str = "standard"
    vif_threshold: float = DEFAULT_VIF_THRESHOLD

    @property
    def selected(self) -> list[str]:
        return [s.chosen for s in self.steps if s.chosen is not None]

    @property
    def aic_sequence(self) -> list[float]:
        return [s.aic_after for s in self.steps if s.chosen is not None]

    def rejected_names(self) -> set[str]:
        return {o.name for s in self.steps for o in s.outcomes if o.rejected}

    def to_dict(self) -> dict:
        return {
            "aic_mode": self.aic_mode,
            "vif_threshold": self.vif_threshold,
            "selected": self.selected,
            "steps": [s.to_dict() for s in self.steps],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def table(self) -> str:
        """One line per step: chosen variable, AIC, fitted and VIF-rejected counts."""
        lines = [f"{'step':>4}  {'chosen':<14} {'aic':>14} {'fitted':>6} {'vif_rej':>7}"]
        for s in self.steps:
            fitted = sum(o.aic is not None for o in s.outcomes)
            rej = sum(o.rejected for o in s.outcomes)
            lines.append(
                f"{s.index:>4}  {(s.chosen or 'STOP'):<14} {s.aic_after:>14.4f} {fitted:>6} {rej:>7}"
            )
        return "\n".join(lines) + "\n"


def forward_select(
    design: DesignMatrix,
    candidates: Sequence[FeatureSpec],
    config: FitConfig = FitConfig(),
    vif_threshold: float = DEFAULT_VIF_THRESHOLD,
) -> tuple[GamModel, SelectionTrace]:
    """Greedy forward selection.

    The first step keeps the best single-variable model.  Later steps drop
    continuous candidates whose VIF against the continuous variables already
    in the model exceeds ``vif_threshold``, fit each survivor added to the
    current model and adopt the lowest AIC, until no addition lowers AIC.
    Ties within 1e-9 go to the earlier candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise SelectionError("no candidates")
    trace = SelectionTrace(aic_mode=config.aic_mode, vif_threshold=vif_threshold)
    cache: dict = {}
    current: list[FeatureSpec] = []
    model: GamModel | None = None
    remaining = list(candidates)

    while True:
        outcomes: list[CandidateOutcome] = []
        best: tuple[float, FeatureSpec, GamModel] | None = None
        included_cont = [design.columns[s.name] for s in current if s.kind != CATEGORICAL]
        for spec in remaining:
            out = CandidateOutcome(spec.name)
            outcomes.append(out)
            if spec.kind != CATEGORICAL:
                try:
                    out.vif = vif(design.columns[spec.name], included_cont)
                except DegenerateCandidate as exc:
                    out.error = str(exc)
                    continue
                if out.vif > vif_threshold:
                    out.rejected = True
                    continue
            try:
                m = fit(design, current + [spec], config, _cache=cache)
            except (GamError, np.linalg.LinAlgError) as exc:
                out.error = f"{type(exc).__name__}: {exc}"
                continue
            out.aic = m.aic
            if best is None or m.aic < best[0] - AIC_TIE:
                best = (m.aic, spec, m)

        if model is None:
            if best is None:
                raise NoViableModel("every single-variable fit failed")
            accept = True
        else:
            accept = best is not None and best[0] < model.aic
        if not accept:
            trace.steps.append(SelectionStep(len(trace.steps) + 1, outcomes, None, model.aic))
            break
        _, spec, model = best
        current.append(spec)
        remaining.remove(spec)
        trace.steps.append(SelectionStep(len(trace.steps) + 1, outcomes, spec.name, model.aic))
        if not remaining:
            trace.steps.append(SelectionStep(len(trace.steps) + 1, [], None, model.aic))
            break

    meta = dict(model.meta)
    meta["selection"] = {"selected": trace.selected, "vif_threshold": vif_threshold}
    return replace(model, meta=meta), trace


def ensure_weekday(
    model: GamModel, design: DesignMatrix, config: FitConfig | None = None
) -> GamModel:
    """Return ``model`` unchanged if it has the weekday term, otherwise refit
    its feature set plus weekday on ``design``."""
    if model.has_term(WEEKDAY.name):
        return model
    if config is None:
        config = FitConfig.from_dict(model.config) if model.config else FitConfig()
    if WEEKDAY.name not in design.columns:
        columns = dict(design.columns)
        columns[WEEKDAY.name] = design.dates.dayofweek.to_numpy().astype(float)
        design = replace(design, columns=columns, kinds={**design.kinds, WEEKDAY.name: CATEGORICAL})
    refit = fit(design, list(model.specs) + [WEEKDAY], config)
    meta = dict(refit.meta)
    if "selection" in model.meta:
        meta["selection"] = model.meta["selection"]
    meta["weekday_added"] = True
    return replace(refit, meta=meta)
