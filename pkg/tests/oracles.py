"""Reference implementations used as independent checks.

Each routine here follows a different computational path from the package
code it is compared against (scalar recursion instead of vectorized
triangular tables, normal equations instead of penalized solves, dense grids
instead of breakpoint search).
"""
import math

import numpy as np


def cox_de_boor(x, i, k, t):
    """Value of the i-th B-spline of degree k on knot vector t at x, by the
    textbook recursion.  The right end of the last non-empty span is closed."""
    if k == 0:
        if t[i] <= x < t[i + 1]:
            return 1.0
        # close the final non-degenerate interval at the right boundary
        if x == t[-1] and t[i] < t[i + 1] == t[-1]:
            return 1.0
        return 0.0
    left = 0.0
    if t[i + k] != t[i]:
        left = (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(x, i, k - 1, t)
    right = 0.0
    if t[i + k + 1] != t[i + 1]:
        right = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(x, i + 1, k - 1, t)
    return left + right


def cox_de_boor_matrix(xs, t, k=3):
    n_basis = len(t) - k - 1
    return np.array([[cox_de_boor(float(x), i, k, t) for i in range(n_basis)] for x in xs])


def ols_line(x, y):
    """Closed-form simple regression fitted values."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xm, ym = x.mean(), y.mean()
    slope = ((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum()
    return ym + slope * (x - xm)


def vif_from_correlation(columns):
    """VIF of every column as the diagonal of the inverse correlation matrix."""
    r = np.corrcoef(np.column_stack(columns), rowvar=False)
    return np.diag(np.linalg.inv(r))


def top_eigvec_bruteforce(corr):
    """Leading eigenvector of a symmetric matrix from the characteristic
    polynomial roots, then the null space of (A - lambda I) by SVD."""
    coeffs = np.poly(corr)
    lam = max(np.roots(coeffs).real)
    _, _, vt = np.linalg.svd(corr - lam * np.eye(len(corr)))
    v = vt[-1]
    return lam, v / np.linalg.norm(v)


def mixture_grid(m_ld, m_pre, meas, step=1e-4):
    grid = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    m_ld, m_pre, meas = (np.asarray(v, float) for v in (m_ld, m_pre, meas))
    best_a, best_f = None, math.inf
    for chunk in np.array_split(grid, 20):
        f = np.abs(chunk[:, None] * m_ld + (1 - chunk[:, None]) * m_pre - meas).mean(axis=1)
        j = int(np.argmin(f))
        if f[j] < best_f:
            best_a, best_f = float(chunk[j]), float(f[j])
    return best_a, best_f


def gaussian_loglik(resid):
    resid = np.asarray(resid, float)
    n = len(resid)
    s2 = (resid ** 2).sum() / n
    return float(np.sum(-0.5 * np.log(2 * np.pi * s2) - resid ** 2 / (2 * s2)))
