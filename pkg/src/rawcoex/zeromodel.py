"""Per-gene dispersion fit from zero counts and chance-of-expression.

The probability that a gene yields no reads in a cell is modeled as
``exp(-f_a(mu))`` where ``mu`` is the estimated expected count and
``f_a`` a one-parameter concave family: ``log(1 + a*mu)/a`` for a > 0
(the gamma-mixture / negative-binomial form) extended continuously by
``(1 - a)*mu`` for a <= 0.  The per-gene dispersion ``a`` is the unique
value matching the expected number of zero cells to the observed one;
the complement ``rho = 1 - exp(-f_a(mu))`` is the chance of expression.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .estimation import EstimatorKind, ModelParams
from .matrix import CountMatrix, marginals

__all__ = [
    "DispersionFit",
    "RhoMatrix",
    "neg_log_zero_prob",
    "expected_zeros",
    "solve_dispersion",
    "fit_dispersion",
    "chance_of_expression",
]

#: Contract tolerance on |expected - observed| zeros, per cell count.
RESIDUAL_TOL = 1e-8
#: Target offset used when the observed count sits at the a -> -inf limit.
_LIMIT_OFFSET = 1e-9
_BISECT_STEPS = 200

_RHO_MAX = np.nextafter(1.0, 0.0)


def neg_log_zero_prob(a: float, mu):
    """-log P(no reads) at dispersion ``a`` and expected count ``mu``.

    Monotone increasing and concave in ``mu`` with unit slope at 0;
    decreasing in ``a``; continuous at a = 0 where it equals ``mu``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if a > 0.0:
        return np.log1p(a * mu) / a
    return (1.0 - a) * mu


def expected_zeros(a: float, mu_row) -> float:
    """Expected number of zero cells: sum of exp(-f_a(mu)) over cells."""
    with np.errstate(under="ignore"):
        return float(np.sum(np.exp(-neg_log_zero_prob(a, mu_row))))


def _solve_target(mu_row: np.ndarray, observed_zeros: float):
    """Effective target for the zero-curve, nudged off the infimum.

    The curve decreases to the number of mu = 0 cells as a -> -inf, so a
    target exactly at that limit has no finite root; it is displaced by
    1e-9 per cell, which keeps the residual far inside the contract
    tolerance of 1e-8 per cell.
    """
    m = mu_row.size
    inf_limit = float(np.count_nonzero(mu_row == 0.0))
    return max(float(observed_zeros), inf_limit + _LIMIT_OFFSET * m)


def solve_dispersion(mu_row, observed_zeros: int) -> float:
    """Dispersion ``a`` matching expected to observed zero cells.

    Bracket expansion from [-50, 50] plus bisection; the zero-curve is a
    strictly increasing function of ``a`` whenever some ``mu`` is
    positive, so the root is unique.  ``a`` may come out negative.
    """
    mu_row = np.asarray(mu_row, dtype=np.float64)
    m = mu_row.size
    if not np.any(mu_row > 0.0):
        raise ValueError("dispersion fit needs at least one positive expected count")
    if np.any(mu_row < 0.0):
        raise ValueError("expected counts must be non-negative")
    if not 0 <= observed_zeros < m:
        raise ValueError("observed zero count must be in [0, n_cells)")

    target = _solve_target(mu_row, observed_zeros)
    lo, hi = -50.0, 50.0
    for _ in range(60):
        if expected_zeros(lo, mu_row) <= target:
            break
        lo *= 2.0
    else:
        raise ArithmeticError("lower bracket expansion failed")
    for _ in range(60):
        if expected_zeros(hi, mu_row) >= target:
            break
        hi *= 2.0
    else:
        raise ArithmeticError("upper bracket expansion failed")

    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if expected_zeros(mid, mu_row) < target:
            lo = mid
        else:
            hi = mid
    a = 0.5 * (lo + hi)
    if abs(expected_zeros(a, mu_row) - observed_zeros) > RESIDUAL_TOL * m:
        raise ArithmeticError(
            f"dispersion bisection did not meet the residual tolerance "
            f"(observed={observed_zeros}, m={m})"
        )
    return a


@dataclass(frozen=True)
class DispersionFit:
    """Per-gene dispersion values with fit diagnostics.

    Unfitted genes (no positive expected counts, e.g. all-zero rows or
    clamped expression estimates) carry NaN dispersion and residual.
    """

    a: np.ndarray
    residual: np.ndarray
    fitted: np.ndarray = field(repr=False)
    mu_source: EstimatorKind = EstimatorKind.AVERAGE

    @property
    def negative(self) -> np.ndarray:
        """Genes pushed into the extended a < 0 region."""
        return self.fitted & (self.a < 0.0)


def _zero_curve_block(a_col, mu_block):
    """Zero-curve values for a block of genes, one ``a`` per row."""
    with np.errstate(invalid="ignore", divide="ignore", under="ignore"):
        pos = np.log1p(np.maximum(a_col, 0.0) * mu_block) / np.where(
            a_col > 0.0, a_col, 1.0
        )
        neg = (1.0 - a_col) * mu_block
        f = np.where(a_col > 0.0, pos, neg)
        return np.exp(-f).sum(axis=1)


def fit_dispersion(
    m: CountMatrix, params: ModelParams, block: int = 256
) -> DispersionFit:
    """Fit every gene's dispersion by blockwise vectorized bisection."""
    stats = marginals(m)
    n = m.n_genes
    a_out = np.full(n, np.nan)
    resid_out = np.full(n, np.nan)
    fitted = params.lam > 0.0

    for start in range(0, n, block):
        idx = np.arange(start, min(start + block, n))
        idx = idx[fitted[idx]]
        if idx.size == 0:
            continue
        mu_block = params.lam[idx, None] * params.nu[None, :]
        observed = stats.gene.zero_cells[idx].astype(np.float64)
        inf_limit = (mu_block == 0.0).sum(axis=1)
        target = np.maximum(observed, inf_limit + _LIMIT_OFFSET * m.n_cells)

        lo = np.full(idx.size, -50.0)
        hi = np.full(idx.size, 50.0)
        for _ in range(60):
            bad = _zero_curve_block(lo[:, None], mu_block) > target
            if not bad.any():
                break
            lo[bad] *= 2.0
        for _ in range(60):
            bad = _zero_curve_block(hi[:, None], mu_block) < target
            if not bad.any():
                break
            hi[bad] *= 2.0
        for _ in range(_BISECT_STEPS):
            mid = 0.5 * (lo + hi)
            stuck = (mid == lo) | (mid == hi)
            if stuck.all():
                break
            below = _zero_curve_block(mid[:, None], mu_block) < target
            lo = np.where(below & ~stuck, mid, lo)
            hi = np.where(~below & ~stuck, mid, hi)
        a = 0.5 * (lo + hi)
        resid = np.abs(_zero_curve_block(a[:, None], mu_block) - observed)
        if np.any(resid > RESIDUAL_TOL * m.n_cells):
            worst = idx[int(np.argmax(resid))]
            raise ArithmeticError(f"dispersion fit failed for gene index {worst}")
        a_out[idx] = a
        resid_out[idx] = resid

    return DispersionFit(
        a=a_out, residual=resid_out, fitted=fitted, mu_source=params.kind
    )


@dataclass(frozen=True)
class RhoMatrix:
    """Dense genes x cells chance-of-expression values in [0, 1).

    Rows of unfitted genes are all zero.  ``gene_sums`` caches per-gene
    row sums with the same reduction the pairwise engine uses.
    """

    rho: np.ndarray = field(repr=False)
    fitted: np.ndarray = field(repr=False)
    mu_source: EstimatorKind

    @property
    def n_genes(self) -> int:
        return self.rho.shape[0]

    @property
    def n_cells(self) -> int:
        return self.rho.shape[1]

    def row(self, g: int) -> np.ndarray:
        return self.rho[g]

    def gene_sums(self) -> np.ndarray:
        return np.sum(self.rho, axis=-1)


def chance_of_expression(params: ModelParams, fit: DispersionFit) -> RhoMatrix:
    """Per-gene, per-cell probability of at least one read.

    The fitted dispersion guarantees each row's expected zero count
    matches the observed one; values are capped one ulp below 1 so the
    open upper bound survives float rounding.
    """
    if fit.a.size != params.lam.size:
        raise ValueError("dispersion fit and parameters have mismatched gene counts")
    n, m = params.lam.size, params.nu.size
    rho = np.zeros((n, m), dtype=np.float64)
    idx = np.flatnonzero(fit.fitted)
    for start in range(0, idx.size, 256):
        sel = idx[start : start + 256]
        mu_block = params.lam[sel, None] * params.nu[None, :]
        a_col = fit.a[sel, None]
        with np.errstate(invalid="ignore", divide="ignore", under="ignore"):
            pos = np.log1p(np.maximum(a_col, 0.0) * mu_block) / np.where(
                a_col > 0.0, a_col, 1.0
            )
            neg = (1.0 - a_col) * mu_block
            f = np.where(a_col > 0.0, pos, neg)
            rho[sel] = -np.expm1(-f)
    np.clip(rho, 0.0, _RHO_MAX, out=rho)
    return RhoMatrix(rho=rho, fitted=fit.fitted.copy(), mu_source=fit.mu_source)
