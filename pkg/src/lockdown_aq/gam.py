"""Penalized-spline additive models on the log response.

A model is ``ln Y = a + sum_j s_j(x_j) + sum_k b_k[Z_k] + eps``.  Each
smooth is a cubic B-spline expansion with a second-order difference penalty
on its coefficients and a sum-to-zero constraint over the training rows;
categorical terms use treatment coding with the first observed level as
reference.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .features import SMOOTH, DesignMatrix, FeatureSpec, PcaModel, build_design

MODEL_FORMAT = "lockdown-aq/gam-model"
MODEL_VERSION = 1

STANDARD = "standard"
HALF_LOGLIK = "half_loglik"  # 2k - ln L, the single-log-likelihood variant
AIC_MODES = (STANDARD, HALF_LOGLIK)


class GamError(ValueError):
    pass


class BadKnots(GamError):
    pass


class RankDeficient(GamError):
    pass


class TooFewRows(GamError):
    pass


class UnseenLevel(GamError):
    pass


class MissingFeature(GamError):
    pass


def default_lambda_grid() -> tuple[float, ...]:
    return tuple(float(v) for v in np.logspace(-4, 4, 13))


@dataclass(frozen=True)
class FitConfig:
    basis_size: int = 10
    lambda_grid: tuple[float, ...] = field(default_factory=default_lambda_grid)
    cycles: int = 3
    aic_mode: str = STANDARD
    centering_tol: float = 1e-8
    ridge: float = 1e-10

    def __post_init__(self):
        if self.basis_size < 4:
            raise ValueError("basis_size must be at least 4")
        if not self.lambda_grid:
            raise ValueError("lambda grid is empty")
        if self.aic_mode not in AIC_MODES:
            raise ValueError(f"aic_mode must be one of {AIC_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda_grid"] = list(self.lambda_grid)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitConfig":
        d = dict(d)
        if "lambda_grid" in d:
            d["lambda_grid"] = tuple(float(v) for v in d["lambda_grid"])
        return cls(**d)


# -- B-splines ---------------------------------------------------------------

def _check_knots(knots: np.ndarray, degree: int) -> None:
    if knots.ndim != 1 or len(knots) < 2 * (degree + 1):
        raise BadKnots(f"need at least {2 * (degree + 1)} knots for degree {degree}")
    if np.any(np.diff(knots) < 0):
        raise BadKnots("knots must be non-decreasing")
    inner = knots[degree:-degree]
    if np.any(np.diff(inner) <= 0):
        raise BadKnots("interior knots must be strictly increasing")


def bspline_basis(x, knots, degree: int = 3) -> np.ndarray:
    """Evaluate all B-splines on ``knots`` at ``x`` (n x K, K = len(knots) - degree - 1).

    ``knots`` is the full knot vector; the boundary knots are normally
    repeated ``degree + 1`` times.  Points outside the boundary knots are
    clamped onto them with a warning.
    """
    t = np.asarray(knots, dtype=float)
    _check_knots(t, degree)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = t[degree], t[-degree - 1]
    if np.any((x < lo) | (x > hi)):
        warnings.warn("bspline_basis: clamping points outside the boundary knots")
        x = np.clip(x, lo, hi)
    n_basis = len(t) - degree - 1
    # knot span index: t[span] <= x < t[span + 1], last span closed on the right
    span = np.searchsorted(t, x, side="right") - 1
    span = np.clip(span, degree, n_basis - 1)

    n = len(x)
    values = np.zeros((n, degree + 1))
    values[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = x - t[span + 1 - j]
        right[:, j] = t[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = values[:, r] / denom
            values[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        values[:, j] = saved

    out = np.zeros((n, n_basis))
    rows = np.arange(n)
    for r in range(degree + 1):
        out[rows, span - degree + r] = values[:, r]
    return out


def make_knots(x, basis_size: int, degree: int = 3) -> np.ndarray:
    """Open knot vector with interior knots at equally spaced quantiles of
    ``x``.  Repeated quantiles are merged, which lowers the basis size."""
    x = np.asarray(x, dtype=float)
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        raise GamError("smooth feature is constant on the training rows")
    n_inner = basis_size - degree - 1
    probs = np.arange(1, n_inner + 1) / (n_inner + 1)
    inner = np.unique(np.quantile(x, probs)) if n_inner > 0 else np.empty(0)
    inner = inner[(inner > lo) & (inner < hi)]
    return np.concatenate([np.full(degree + 1, lo), inner, np.full(degree + 1, hi)])


def difference_penalty(knots, degree: int = 3) -> np.ndarray:
    """Second-order difference penalty taken against the Greville abscissae.

    On equally spaced abscissae this is the usual P-spline penalty; in
    general its null space is exactly the coefficient vectors of straight
    lines, so unbounded smoothing tends to the least-squares line.
    """
    t = np.asarray(knots, dtype=float)
    k = len(t) - degree - 1
    g = np.array([t[i + 1: i + degree + 1].mean() for i in range(k)])
    h = (g[-1] - g[0]) / (k - 1)
    gaps = np.diff(g)
    d = np.zeros((k - 2, k))
    for i in range(k - 2):
        d[i, i] = h / gaps[i]
        d[i, i + 1] = -h / gaps[i] - h / gaps[i + 1]
        d[i, i + 2] = h / gaps[i + 1]
    return d.T @ d


# -- model types ---------------------------------------------------------------

@dataclass(frozen=True)
class SmoothTerm:
    name: str
    knots: tuple[float, ...]
    coefficients: tuple[float, ...]
    lam: float
    edf: float
    degree: int = 3
    penalty_order: int = 2

    @property
    def basis_size(self) -> int:
        return len(self.coefficients)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.knots[self.degree], self.knots[-self.degree - 1]

    def __call__(self, x) -> np.ndarray:
        lo, hi = self.bounds
        xc = np.clip(np.asarray(x, dtype=float), lo, hi)
        return bspline_basis(xc, self.knots, self.degree) @ np.asarray(self.coefficients)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "knots": list(self.knots),
            "coefficients": list(self.coefficients),
            "lambda": self.lam,
            "edf": self.edf,
            "degree": self.degree,
            "penalty_order": self.penalty_order,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SmoothTerm":
        return cls(
            d["name"], tuple(d["knots"]), tuple(d["coefficients"]), d["lambda"], d["edf"],
            d.get("degree", 3), d.get("penalty_order", 2),
        )


@dataclass(frozen=True)
class CategoricalTerm:
    name: str
    levels: tuple[int, ...]
    coefficients: tuple[float, ...]
    edf: float

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        lookup = {float(lv): c for lv, c in zip(self.levels, self.coefficients)}
        unseen = sorted({float(v) for v in np.unique(z)} - set(lookup))
        if unseen:
            raise UnseenLevel(f"{self.name}: levels {unseen} not seen in training")
        return np.array([lookup[float(v)] for v in z], dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "levels": list(self.levels),
            "coefficients": list(self.coefficients),
            "edf": self.edf,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CategoricalTerm":
        return cls(d["name"], tuple(int(v) for v in d["levels"]), tuple(d["coefficients"]), d["edf"])


@dataclass(frozen=True)
class GamModel:
    intercept: float
    smooths: tuple[SmoothTerm, ...]
    categoricals: tuple[CategoricalTerm, ...]
    specs: tuple[FeatureSpec, ...]
    sigma2: float
    n_train: int
    total_edf: float
    log_likelihood: float
    aic: float
    aic_mode: str = STANDARD
    target: str = ""
    station_id: str = ""
    pca: PcaModel | None = None
    config: Mapping = field(default_factory=dict)
    meta: Mapping = field(default_factory=dict)
    transfer_provenance: Mapping | None = None
    fitted: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def terms(self) -> dict[str, SmoothTerm | CategoricalTerm]:
        out: dict = {t.name: t for t in self.smooths}
        out.update({t.name: t for t in self.categoricals})
        return out

    @property
    def feature_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def has_term(self, name: str) -> bool:
        return name in self.terms

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "station_id": self.station_id,
            "target": self.target,
            "intercept": self.intercept,
            "features": [s.to_dict() for s in self.specs],
            "smooths": [t.to_dict() for t in self.smooths],
            "categoricals": [t.to_dict() for t in self.categoricals],
            "sigma2": self.sigma2,
            "n_train": self.n_train,
            "total_edf": self.total_edf,
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "aic_mode": self.aic_mode,
            "pca": None if self.pca is None else self.pca.to_dict(),
            "config": dict(self.config),
            "meta": dict(self.meta),
            "transfer_provenance": None
            if self.transfer_provenance is None
            else dict(self.transfer_provenance),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GamModel":
        if d.get("format") != MODEL_FORMAT:
            raise GamError(f"not a model document: format={d.get('format')!r}")
        if d.get("version") != MODEL_VERSION:
            raise GamError(f"unsupported model version {d.get('version')!r}")
        return cls(
            intercept=d["intercept"],
            smooths=tuple(SmoothTerm.from_dict(t) for t in d["smooths"]),
            categoricals=tuple(CategoricalTerm.from_dict(t) for t in d["categoricals"]),
            specs=tuple(FeatureSpec.from_dict(s) for s in d["features"]),
            sigma2=d["sigma2"],
            n_train=d["n_train"],
            total_edf=d["total_edf"],
            log_likelihood=d["log_likelihood"],
            aic=d["aic"],
            aic_mode=d.get("aic_mode", STANDARD),
            target=d.get("target", ""),
            station_id=d.get("station_id", ""),
            pca=None if d.get("pca") is None else PcaModel.from_dict(d["pca"]),
            config=d.get("config", {}),
            meta=d.get("meta", {}),
            transfer_provenance=d.get("transfer_provenance"),
        )


def to_json(model: GamModel) -> str:
    return json.dumps(model.to_dict(), sort_keys=True, indent=1) + "\n"


def from_json(text: str) -> GamModel:
    return GamModel.from_dict(json.loads(text))


def model_hash(model: GamModel) -> str:
    return hashlib.sha256(to_json(model).encode()).hexdigest()


# -- likelihood / criteria -----------------------------------------------------

def gaussian_loglik(rss: float, n: int) -> float:
    """Maximized Gaussian log-likelihood of ``n`` residuals with sum of squares ``rss``."""
    if rss <= 0.0:
        return math.inf
    return -0.5 * n * (math.log(2.0 * math.pi * rss / n) + 1.0)


def aic_value(total_edf: float, log_likelihood: float, mode: str = STANDARD) -> float:
    k = total_edf + 1.0  # + residual variance
    if mode == STANDARD:
        return 2.0 * k - 2.0 * log_likelihood
    if mode == HALF_LOGLIK:
        return 2.0 * k - log_likelihood
    raise ValueError(f"unknown AIC mode {mode!r}")


def aic(model: GamModel, mode: str | None = None) -> float:
    return aic_value(model.total_edf, model.log_likelihood, mode or model.aic_mode)


# -- assembly and solving --------------------------------------------------------

@dataclass
class _SmoothBlock:
    name: str
    knots: np.ndarray
    basis: np.ndarray     # n x K
    constraint: np.ndarray  # K x (K-1), orthonormal columns
    penalty: np.ndarray   # (K-1) x (K-1)


@dataclass
class _CatBlock:
    name: str
    levels: tuple[int, ...]
    dummies: np.ndarray   # n x (L-1)


@dataclass
class Problem:
    """Model-space design for a fixed feature set (intercept first)."""

    X: np.ndarray
    r: np.ndarray
    slices: dict[str, slice]
    smooths: list[_SmoothBlock]
    cats: list[_CatBlock]
    specs: list[FeatureSpec]
    XtX: np.ndarray
    Xtr: np.ndarray
    rtr: float
    ridge: float

    @property
    def n(self) -> int:
        return len(self.r)

    def penalty_matrix(self, lambdas: Sequence[float]) -> np.ndarray:
        p = self.X.shape[1]
        S = np.zeros((p, p))
        for lam, blk in zip(lambdas, self.smooths):
            sl = self.slices[blk.name]
            S[sl, sl] += lam * blk.penalty
        idx = np.arange(1, p)
        S[idx, idx] += self.ridge
        return S

    def objective(self, theta: np.ndarray, lambdas: Sequence[float]) -> float:
        resid = self.r - self.X @ theta
        return float(resid @ resid + theta @ self.penalty_matrix(lambdas) @ theta)


def _smooth_block(name: str, x: np.ndarray, basis_size: int, cache: dict | None) -> _SmoothBlock:
    if cache is not None and ("smooth", name) in cache:
        return cache[("smooth", name)]
    knots = make_knots(x, basis_size)
    B = bspline_basis(x, knots)
    colsum = B.sum(axis=0)[:, None]
    q, _ = np.linalg.qr(colsum, mode="complete")
    Z = q[:, 1:]
    P = difference_penalty(knots)
    blk = _SmoothBlock(name, knots, B, Z, Z.T @ P @ Z)
    if cache is not None:
        cache[("smooth", name)] = blk
    return blk


def _cat_block(name: str, z: np.ndarray, cache: dict | None) -> _CatBlock:
    if cache is not None and ("cat", name) in cache:
        return cache[("cat", name)]
    levels = tuple(int(v) for v in np.unique(z))
    dummies = np.column_stack([(z == lv).astype(float) for lv in levels[1:]]) if len(levels) > 1 else np.zeros((len(z), 0))
    blk = _CatBlock(name, levels, dummies)
    if cache is not None:
        cache[("cat", name)] = blk
    return blk


def assemble(
    design: DesignMatrix,
    specs: Sequence[FeatureSpec],
    config: FitConfig = FitConfig(),
    cache: dict | None = None,
) -> Problem:
    n = len(design)
    cols = [np.ones((n, 1))]
    slices: dict[str, slice] = {}
    smooths: list[_SmoothBlock] = []
    cats: list[_CatBlock] = []
    pos = 1
    for spec in specs:
        if spec.name not in design.columns:
            raise MissingFeature(f"design has no column {spec.name!r}")
        x = np.asarray(design.columns[spec.name], dtype=float)
        if spec.kind == SMOOTH:
            blk = _smooth_block(spec.name, x, config.basis_size, cache)
            m = blk.basis @ blk.constraint
            smooths.append(blk)
        else:
            blk = _cat_block(spec.name, x, cache)
            m = blk.dummies
            cats.append(blk)
        slices[spec.name] = slice(pos, pos + m.shape[1])
        pos += m.shape[1]
        cols.append(m)
    X = np.hstack(cols)
    r = np.asarray(design.response, dtype=float)
    return Problem(X, r, slices, smooths, cats, list(specs), X.T @ X, X.T @ r, float(r @ r), config.ridge)


@dataclass
class _Solution:
    theta: np.ndarray
    edf_diag: np.ndarray
    rss: float

    @property
    def edf(self) -> float:
        return float(self.edf_diag.sum())


def _solve(problem: Problem, lambdas: Sequence[float]) -> _Solution:
    A = problem.XtX + problem.penalty_matrix(lambdas)
    try:
        cho = linalg.cho_factor(A, lower=False, check_finite=True)
    except linalg.LinAlgError as exc:
        raise RankDeficient(f"penalized normal equations are singular: {exc}") from None
    theta = linalg.cho_solve(cho, problem.Xtr)
    F = linalg.cho_solve(cho, problem.XtX)
    if not np.all(np.isfinite(theta)):
        raise RankDeficient("non-finite coefficients")
    rss = problem.rtr - 2.0 * theta @ problem.Xtr + theta @ problem.XtX @ theta
    return _Solution(theta, np.diag(F).copy(), max(float(rss), 0.0))


def _gcv(n: int, rss: float, edf: float) -> float:
    if edf > n - 1:
        return math.inf
    return n * rss / (n - edf) ** 2


def gcv_score(
    design: DesignMatrix,
    specs: Sequence[FeatureSpec],
    lambdas: Sequence[float] | Mapping[str, float],
    config: FitConfig = FitConfig(),
) -> float:
    """``n * RSS / (n - edf)^2`` of the penalized fit at fixed smoothing weights."""
    problem = assemble(design, specs, config)
    lams = _lambda_vector(problem, lambdas)
    sol = _solve(problem, lams)
    return _gcv(problem.n, sol.rss, sol.edf)


def _lambda_vector(problem: Problem, lambdas) -> list[float]:
    if isinstance(lambdas, Mapping):
        return [float(lambdas[b.name]) for b in problem.smooths]
    lams = [float(v) for v in lambdas]
    if len(lams) != len(problem.smooths):
        raise ValueError("one smoothing weight per smooth term expected")
    return lams


def select_lambdas(
    problem: Problem,
    config: FitConfig,
    fixed: Mapping[str, float] | None = None,
) -> tuple[list[float], dict]:
    """Block-wise GCV descent over the configured grid."""
    fixed = dict(fixed or {})
    grid = list(config.lambda_grid)
    start = grid[len(grid) // 2]
    lams = [fixed.get(b.name, start) for b in problem.smooths]
    memo: dict[tuple, float] = {}

    def score(vec: list[float]) -> float:
        key = tuple(vec)
        if key not in memo:
            try:
                sol = _solve(problem, vec)
                memo[key] = _gcv(problem.n, sol.rss, sol.edf)
            except RankDeficient:
                memo[key] = math.inf
        return memo[key]

    free = [j for j, b in enumerate(problem.smooths) if b.name not in fixed]
    converged = not free
    cycles_run = 0
    for _ in range(config.cycles if free else 0):
        cycles_run += 1
        changed = False
        for j in free:
            best_lam, best = lams[j], score(lams)
            for lam in grid:
                trial = lams.copy()
                trial[j] = lam
                s = score(trial)
                if s < best:
                    best, best_lam = s, lam
            if best_lam != lams[j]:
                lams[j] = best_lam
                changed = True
        if not changed:
            converged = True
            break
    return lams, {
        "gcv": score(lams),
        "converged": converged,
        "cycles_run": cycles_run,
        "evaluations": len(memo),
    }


def fit(
    design: DesignMatrix,
    specs: Sequence[FeatureSpec],
    config: FitConfig = FitConfig(),
    lambdas: Mapping[str, float] | None = None,
    _cache: dict | None = None,
) -> GamModel:
    """Fit a penalized additive model to ``design.response`` (the log concentration).

    Smoothing weights not pinned in ``lambdas`` are chosen by GCV.
    """
    specs = list(specs)
    n_terms = len(specs)
    if len(design) < 10 * (1 + n_terms):
        raise TooFewRows(f"{len(design)} rows for {n_terms} term(s); need {10 * (1 + n_terms)}")
    problem = assemble(design, specs, config, cache=_cache)
    lams, info = select_lambdas(problem, config, lambdas)
    sol = _solve(problem, lams)

    smooths = []
    edf_by_term: dict[str, float] = {}
    for lam, blk in zip(lams, problem.smooths):
        sl = problem.slices[blk.name]
        beta = blk.constraint @ sol.theta[sl]
        edf = float(sol.edf_diag[sl].sum())
        edf_by_term[blk.name] = edf
        smooths.append(SmoothTerm(blk.name, tuple(float(v) for v in blk.knots), tuple(float(v) for v in beta), float(lam), edf))
    cats = []
    for blk in problem.cats:
        sl = problem.slices[blk.name]
        coefs = (0.0,) + tuple(float(v) for v in sol.theta[sl])
        edf = float(sol.edf_diag[sl].sum())
        edf_by_term[blk.name] = edf
        cats.append(CategoricalTerm(blk.name, blk.levels, coefs, edf))

    intercept_edf = float(sol.edf_diag[0])
    total_edf = intercept_edf + sum(edf_by_term.values())
    draft = GamModel(
        intercept=float(sol.theta[0]),
        smooths=tuple(smooths),
        categoricals=tuple(cats),
        specs=tuple(specs),
        sigma2=0.0,
        n_train=len(design),
        total_edf=total_edf,
        log_likelihood=0.0,
        aic=0.0,
        aic_mode=config.aic_mode,
        target=design.target,
        station_id=design.station_id,
        pca=design.pca if any(s.source == "PCA" for s in specs) else None,
    )
    eta, _ = linear_predictor(draft, design.columns, n=len(design))
    resid = design.response - eta
    rss = float(resid @ resid)
    n = len(design)
    ll = gaussian_loglik(rss, n)
    meta = {
        "lambda_grid": list(config.lambda_grid),
        "lambda_selection": info,
        "intercept_edf": intercept_edf,
        "rss": rss,
        "train_start": design.dates[0].strftime("%Y-%m-%d") if len(design.dates) else None,
        "train_end": design.dates[-1].strftime("%Y-%m-%d") if len(design.dates) else None,
        "dropped_rows": dict(design.dropped),
        "back_transform": "exp of linear predictor, no smearing correction",
    }
    return replace(
        draft,
        sigma2=rss / (n - total_edf) if n > total_edf else math.nan,
        log_likelihood=ll,
        aic=aic_value(total_edf, ll, config.aic_mode),
        config=config.to_dict(),
        meta=meta,
        fitted=eta,
    )


# -- prediction --------------------------------------------------------------------

def term_contributions(
    model: GamModel, columns: Mapping[str, np.ndarray], n: int | None = None
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-term contributions on the log scale, and a per-row flag marking
    smooth inputs that were clamped to the boundary knots."""
    terms = model.terms
    out: dict[str, np.ndarray] = {}
    clamped = None
    for spec in model.specs:
        if spec.name not in columns:
            raise MissingFeature(f"missing feature column {spec.name!r}")
        x = np.asarray(columns[spec.name], dtype=float)
        if not np.all(np.isfinite(x)):
            raise MissingFeature(f"feature {spec.name!r} has missing values")
        if clamped is None:
            clamped = np.zeros(len(x), dtype=bool)
        term = terms[spec.name]
        if isinstance(term, SmoothTerm):
            lo, hi = term.bounds
            clamped |= (x < lo) | (x > hi)
        out[spec.name] = term(x)
    if clamped is None:
        if n is None:
            n = len(next(iter(columns.values()))) if columns else 0
        clamped = np.zeros(n, dtype=bool)
    return out, clamped


def linear_predictor(
    model: GamModel, columns: Mapping[str, np.ndarray], n: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    contrib, clamped = term_contributions(model, columns, n)
    if n is None:
        n = len(clamped)
    eta = np.full(n, model.intercept)
    for name in model.feature_names:
        eta = eta + contrib[name]
    return eta, clamped


def predict(model: GamModel, columns: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
    """Concentrations ``exp(a + sum of terms)`` for each row of ``columns``."""
    eta, _ = linear_predictor(model, columns, n)
    return np.exp(eta)


def design_for_model(model: GamModel, series, start=None, end=None) -> DesignMatrix:
    """Design matrix for ``series`` built with the model's own feature set and
    PCA standardization, limited to ``[start, end]``."""
    specs = list(model.specs)
    if specs:
        return build_design(series, model.target, specs, pca=model.pca, start=start, end=end)
    # intercept-only model: any always-defined column gives the same row filter
    design = build_design(series, model.target, [FeatureSpec("D")], start=start, end=end)
    return replace(design, columns={}, kinds={})
