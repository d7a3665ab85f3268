"""Special functions for square-root transformed Poisson counts.

For ``N ~ Poisson(x)`` the transform ``sqrt(N)`` is variance stabilizing:
its variance ``sqrt_var(x)`` tends to 1/4 as x grows, with a global
maximum of about 0.41249.  This module evaluates the mean ``sqrt_mean``
(monotone, so invertible), its inverse ``sqrt_mean_inv`` and the second
derivative of the inverse, all to ~1e-12 absolute accuracy, plus the
chi-square distribution helpers used by the test statistics downstream.

Evaluation strategy: below ``asymptotic_switch`` the Poisson expectation
is summed over a +-12*sqrt(x) window of max-normalized weights (direct
``exp(k log x - x - lgamma(k+1))`` cancels badly for large x); above the
switch a two-term tail expansion of the variance is used, where it agrees
with the series to ~2e-13.  The variance is computed as a centered second
moment, never as ``x - mean**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import (
    gammainc,
    gammaincc,
    gammaincinv,
    gammainccinv,
    gammaln,
    log_ndtr,
)

__all__ = [
    "SqrtPoissonEval",
    "DEFAULT_EVAL",
    "SQRT_VAR_MAX",
    "sqrt_mean",
    "sqrt_var",
    "sqrt_mean_inv",
    "sqrt_mean_inv_d2",
    "chi2_cdf",
    "chi2_sf",
    "chi2_log_sf",
    "chi2_quantile",
    "chi2_isf",
]

#: Global maximum of sqrt_var, attained near x = 1.319.
SQRT_VAR_MAX = 0.41249250940


@dataclass(frozen=True)
class SqrtPoissonEval:
    """Evaluation settings for the square-root Poisson functions.

    series_rel_tol
        Relative weight below which window terms are dropped.
    asymptotic_switch
        Argument above which the closed-form tail replaces the series.
    newton_tol
        Residual tolerance for inverting ``sqrt_mean``.
    """

    series_rel_tol: float = 1e-12
    asymptotic_switch: float = 1e4
    newton_tol: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.series_rel_tol <= 1e-10:
            raise ValueError("series_rel_tol must be in (0, 1e-10]")
        if self.asymptotic_switch < 10.0:
            raise ValueError("asymptotic_switch must be >= 10")
        if self.newton_tol > 1e-10:
            raise ValueError("newton_tol must be <= 1e-10")


DEFAULT_EVAL = SqrtPoissonEval()

_WINDOW_HALF_WIDTHS = 12.0
_FULL_HEAD_BELOW = 25.0


def _window_weights(x: float, rel_tol: float):
    """Poisson(x) weights over a certified window, normalized to sum 1.

    The window covers +-12*sqrt(x) around x (full head below x=25); the
    excluded tail mass is < e^-72.  Weights are max-normalized before
    exponentiation so only relative accuracy of the exponent matters.
    """
    if x < _FULL_HEAD_BELOW:
        hi = int(math.ceil(x + _WINDOW_HALF_WIDTHS * math.sqrt(max(x, 1.0)) + 25.0))
        k = np.arange(0, hi + 1, dtype=np.float64)
    else:
        half = _WINDOW_HALF_WIDTHS * math.sqrt(x)
        k = np.arange(math.floor(x - half), math.ceil(x + half) + 1.0, dtype=np.float64)
    logw = k * math.log(x) - gammaln(k + 1.0)
    logw -= logw.max()
    keep = logw >= math.log(rel_tol) - 5.0
    k = k[keep]
    w = np.exp(logw[keep])
    w /= w.sum()
    return k, w


def _tau_tail(x):
    return 0.25 + 3.0 / (32.0 * x) + 17.0 / (128.0 * x * x)


def _tau_tail_d1(x):
    return -3.0 / (32.0 * x * x) - 17.0 / (64.0 * x * x * x)


def _tau_tail_d2(x):
    return 3.0 / (16.0 * x**3) + 51.0 / (64.0 * x**4)


def _phi_scalar(x: float, cfg: SqrtPoissonEval) -> float:
    if x == 0.0:
        return 0.0
    if x >= cfg.asymptotic_switch:
        return math.sqrt(x - _tau_tail(x))
    k, w = _window_weights(x, cfg.series_rel_tol)
    return float(np.sum(np.sqrt(k) * w))


def _tau_scalar(x: float, cfg: SqrtPoissonEval) -> float:
    if x == 0.0:
        return 0.0
    if x >= cfg.asymptotic_switch:
        return _tau_tail(x)
    k, w = _window_weights(x, cfg.series_rel_tol)
    s = np.sqrt(k)
    m1 = float(np.sum(s * w))
    return float(np.sum(w * (s - m1) ** 2))


def _phi_d1_scalar(x: float, cfg: SqrtPoissonEval) -> float:
    # d/dx E[f(N)] = E[f(N+1) - f(N)] for Poisson expectations.
    if x == 0.0:
        return 1.0
    if x >= cfg.asymptotic_switch:
        u = x - _tau_tail(x)
        return (1.0 - _tau_tail_d1(x)) / (2.0 * math.sqrt(u))
    k, w = _window_weights(x, cfg.series_rel_tol)
    return float(np.sum((np.sqrt(k + 1.0) - np.sqrt(k)) * w))


def _phi_d2_scalar(x: float, cfg: SqrtPoissonEval) -> float:
    if x == 0.0:
        return math.sqrt(2.0) - 2.0
    if x >= cfg.asymptotic_switch:
        u = x - _tau_tail(x)
        du = 1.0 - _tau_tail_d1(x)
        return -_tau_tail_d2(x) / (2.0 * math.sqrt(u)) - du * du / (4.0 * u**1.5)
    k, w = _window_weights(x, cfg.series_rel_tol)
    d2 = np.sqrt(k + 2.0) - 2.0 * np.sqrt(k + 1.0) + np.sqrt(k)
    return float(np.sum(d2 * w))


def _psi_scalar(y: float, cfg: SqrtPoissonEval) -> float:
    if y == 0.0:
        return 0.0
    # The inverse lies in [y^2, y^2 + SQRT_VAR_MAX]; Newton with the
    # bracket as a safety net converges in a handful of iterations.
    lo = y * y
    hi = lo + SQRT_VAR_MAX + 1e-9
    v = lo + 0.25 if y >= 1.0 else min(y + 0.3 * lo, hi)
    for _ in range(100):
        f = _phi_scalar(v, cfg) - y
        if abs(f) <= cfg.newton_tol:
            return v
        if f > 0.0:
            hi = v
        else:
            lo = v
        d = _phi_d1_scalar(v, cfg)
        v_next = v - f / d if d > 0.0 else v
        if not lo < v_next < hi:
            v_next = 0.5 * (lo + hi)
        if v_next == v:
            return v
        v = v_next
    raise ArithmeticError(f"sqrt_mean inversion did not converge at y={y!r}")


def _psi_d2_scalar(y: float, cfg: SqrtPoissonEval) -> float:
    v = _psi_scalar(y, cfg)
    d1 = _phi_d1_scalar(v, cfg)
    d2 = _phi_d2_scalar(v, cfg)
    return -d2 / d1**3


def _apply(fn, x, cfg):
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0.0):
        raise ValueError("argument must be non-negative")
    if arr.ndim == 0:
        return fn(float(arr), cfg)
    out = np.empty(arr.shape, dtype=np.float64)
    flat_in = arr.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.size):
        flat_out[i] = fn(flat_in[i], cfg)
    return out


def sqrt_mean(x, cfg: SqrtPoissonEval = DEFAULT_EVAL):
    """E[sqrt(N)] for N ~ Poisson(x); scalar or elementwise on arrays."""
    return _apply(_phi_scalar, x, cfg)


def sqrt_var(x, cfg: SqrtPoissonEval = DEFAULT_EVAL):
    """Var[sqrt(N)] for N ~ Poisson(x); equals x - sqrt_mean(x)**2."""
    return _apply(_tau_scalar, x, cfg)


def sqrt_mean_inv(y, cfg: SqrtPoissonEval = DEFAULT_EVAL):
    """Inverse of sqrt_mean: the Poisson mean whose sqrt-mean is y."""
    return _apply(_psi_scalar, y, cfg)


def sqrt_mean_inv_d2(y, cfg: SqrtPoissonEval = DEFAULT_EVAL):
    """Second derivative of sqrt_mean_inv (tends to 2 for large y)."""
    return _apply(_psi_d2_scalar, y, cfg)


def _check_chi2_args(x, dof):
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    if np.any(np.asarray(x) < 0.0):
        raise ValueError("chi-square argument must be non-negative")


def chi2_cdf(x, dof: int = 1):
    """Chi-square CDF: regularized lower incomplete gamma P(dof/2, x/2)."""
    _check_chi2_args(x, dof)
    return gammainc(dof / 2.0, np.asarray(x, dtype=np.float64) / 2.0)


def chi2_sf(x, dof: int = 1):
    """Chi-square survival function, computed directly (not 1 - CDF)."""
    _check_chi2_args(x, dof)
    return gammaincc(dof / 2.0, np.asarray(x, dtype=np.float64) / 2.0)


def chi2_log_sf(x, dof: int = 1):
    """log of the chi-square survival function, stable far in the tail.

    For one degree of freedom SF(x) = erfc(sqrt(x/2)) = 2*Phi(-sqrt(x)),
    so log SF = log 2 + log_ndtr(-sqrt(x)) stays finite and strictly
    decreasing for arbitrarily large x.
    """
    _check_chi2_args(x, dof)
    x = np.asarray(x, dtype=np.float64)
    if dof == 1:
        return math.log(2.0) + log_ndtr(-np.sqrt(x))
    with np.errstate(divide="ignore"):
        return np.log(gammaincc(dof / 2.0, x / 2.0))


def chi2_quantile(q, dof: int = 1):
    """Inverse CDF of the chi-square distribution."""
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    q = np.asarray(q, dtype=np.float64)
    if np.any((q < 0.0) | (q > 1.0)):
        raise ValueError("quantile level must be in [0, 1]")
    return 2.0 * gammaincinv(dof / 2.0, q)


def chi2_isf(p, dof: int = 1):
    """Inverse survival function (upper-tail quantile)."""
    if int(dof) != dof or dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof!r}")
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0.0) | (p > 1.0)):
        raise ValueError("tail probability must be in [0, 1]")
    return 2.0 * gammainccinv(dof / 2.0, p)
