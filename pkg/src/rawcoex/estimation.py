"""Per-cell efficiency and per-gene expression estimators.

Two moment-based estimators are provided.  The plain averages use row,
column and grand means of the raw counts.  The square-root-corrected
variant works on sqrt-transformed counts, whose variance barely depends
on the mean, and undoes the transform with a second-order correction;
it trades a small bias for robustness against high-variance genes.

Efficiencies are always normalized to mean 1 over cells, which fixes
the scale shared between efficiency and expression.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .matrix import CountMatrix, marginals
from .sqrtpoisson import DEFAULT_EVAL, SqrtPoissonEval, sqrt_mean_inv, sqrt_mean_inv_d2

__all__ = ["EstimatorKind", "ModelParams", "estimate_average", "estimate_sqrt", "expected_count", "expected_row"]


class EstimatorKind(str, enum.Enum):
    AVERAGE = "average"
    SQRT = "sqrt"


@dataclass(frozen=True)
class ModelParams:
    """Estimated per-cell efficiencies and per-gene expression levels.

    ``nu`` averages to 1 over cells; ``lam`` is non-negative, with
    ``lam_clamped`` flagging genes whose corrected estimate came out
    negative and was clamped to 0.
    """

    nu: np.ndarray
    lam: np.ndarray
    kind: EstimatorKind
    lam_clamped: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.lam_clamped is None:
            object.__setattr__(
                self, "lam_clamped", np.zeros(self.lam.shape, dtype=bool)
            )
        if abs(float(self.nu.mean()) - 1.0) > 1e-9:
            raise ValueError("cell efficiencies must average to 1")
        if np.any(self.lam < 0):
            raise ValueError("expression estimates must be non-negative")

    @property
    def n_genes(self) -> int:
        return self.lam.size

    @property
    def n_cells(self) -> int:
        return self.nu.size


def estimate_average(m: CountMatrix) -> ModelParams:
    """Row/column-mean estimators (unbiased for the expression levels)."""
    s = marginals(m)
    if s.grand_total == 0:
        raise ValueError("cannot estimate parameters of an all-zero matrix")
    lam = s.gene.row_sum / m.n_cells
    nu = s.cell_total * (m.n_cells / s.grand_total)
    return ModelParams(nu=nu, lam=lam, kind=EstimatorKind.AVERAGE)


def _sqrt_row_stats(m: CountMatrix):
    """Per-gene and per-cell sums of sqrt counts (exact squares from ints)."""
    sq = np.sqrt(m.values.astype(np.float64))
    gene_sqrt_sum = np.zeros(m.n_genes)
    rows = np.repeat(np.arange(m.n_genes), np.diff(m.indptr))
    np.add.at(gene_sqrt_sum, rows, sq)
    cell_sqrt_sum = np.zeros(m.n_cells)
    np.add.at(cell_sqrt_sum, m.cell_index, sq)
    return gene_sqrt_sum, cell_sqrt_sum


def _corrected(sqrt_sum, square_sum, count, cfg):
    """Second-order corrected inverse transform of a sqrt-count average.

    sqrt_sum and square_sum are the sums of X and X^2 over the axis of
    length ``count`` (X^2 sums are integer count totals, hence exact).
    """
    mean = sqrt_sum / count
    # ((count-1)/count) * sample variance, in a cancellation-free form
    biased_var = (square_sum - sqrt_sum**2 / count) / count
    main = sqrt_mean_inv(mean, cfg)
    curv = sqrt_mean_inv_d2(mean, cfg)
    return main + 0.5 * curv * (biased_var - main + mean**2)


def estimate_sqrt(m: CountMatrix, cfg: SqrtPoissonEval = DEFAULT_EVAL) -> ModelParams:
    """Square-root-corrected estimators.

    Requires at least 2 genes and 2 cells (sample variances).  Negative
    corrected expression values are clamped to 0 and flagged.
    """
    if m.n_cells < 2 or m.n_genes < 2:
        raise ValueError("square-root estimation needs at least 2 genes and 2 cells")
    s = marginals(m)
    if s.grand_total == 0:
        raise ValueError("cannot estimate parameters of an all-zero matrix")
    gene_sqrt_sum, cell_sqrt_sum = _sqrt_row_stats(m)

    lam = _corrected(gene_sqrt_sum, s.gene.row_sum.astype(np.float64), m.n_cells, cfg)
    clamped = lam < 0.0
    if np.any(clamped):
        lam = np.where(clamped, 0.0, lam)

    nu = _corrected(cell_sqrt_sum, s.cell_total.astype(np.float64), m.n_genes, cfg)
    nu_mean = float(nu.mean())
    if nu_mean <= 0.0:
        raise ValueError("degenerate efficiency estimates (non-positive mean)")
    nu = nu / nu_mean
    return ModelParams(nu=nu, lam=lam, kind=EstimatorKind.SQRT, lam_clamped=clamped)


def expected_count(params: ModelParams, g: int, c: int) -> float:
    """Expected read count of gene g in cell c under the fitted params."""
    return float(params.lam[g] * params.nu[c])


def expected_row(params: ModelParams, g: int) -> np.ndarray:
    """Expected read counts of gene g across all cells."""
    return params.lam[g] * params.nu
