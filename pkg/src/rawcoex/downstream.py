"""Differential expression across conditions and gene differentiation scores.

The differential-expression test generalizes the pairwise machinery to a
2 x k expression/condition table: cells of each condition are split by
zero/nonzero read count, expected splits come from the chance of
expression, and the clamped deviation statistic is approximately
chi-square(k-1) under no differential expression.

The differentiation score of a gene summarizes its pairwise signed
indices genome-wide: ``s`` is a very high percentile of the squared
indices against all other genes, and ``gdi = log(-log(sf(s)))`` is a
monotone rescaling convenient for thresholding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coexpression import PairBlock, pair_count
from .matrix import CountMatrix
from .sqrtpoisson import chi2_isf, chi2_log_sf, chi2_sf
from .zeromodel import RhoMatrix

__all__ = [
    "ConditionPartition",
    "DiffExpResult",
    "GdiScore",
    "diff_expression",
    "gdi_scores",
    "gdi_threshold_test",
    "GDI_FLOOR",
]

#: Reported gdi for genes whose score is exactly 0 (log(-log 1) diverges).
GDI_FLOOR = -10.0


@dataclass(frozen=True)
class ConditionPartition:
    """Assignment of every cell to one of k >= 2 non-empty conditions."""

    labels: np.ndarray  # int codes 0..k-1, one per cell
    names: tuple[str, ...]

    def __post_init__(self):
        k = len(self.names)
        if k < 2:
            raise ValueError("need at least 2 conditions")
        counts = np.bincount(self.labels, minlength=k)
        if self.labels.size and counts.min() == 0:
            raise ValueError("every condition must contain at least one cell")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError("condition labels out of range")

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    @classmethod
    def from_labels(cls, raw_labels) -> "ConditionPartition":
        names, codes = np.unique(np.asarray(raw_labels), return_inverse=True)
        return cls(labels=codes.astype(np.int64), names=tuple(str(x) for x in names))


@dataclass(frozen=True)
class DiffExpResult:
    w: float
    dof: int
    p_value: float
    observed: np.ndarray = field(repr=False)  # 2 x k (nonzero, zero rows)
    expected: np.ndarray = field(repr=False)


def diff_expression(
    m: CountMatrix, rho: RhoMatrix, part: ConditionPartition, g: int
) -> DiffExpResult:
    """Test gene ``g`` for differential expression across conditions."""
    if part.labels.size != m.n_cells:
        raise ValueError("partition does not cover the cells")
    if not rho.fitted[g]:
        raise ValueError(f"gene index {g} has no dispersion fit")
    k = part.k
    sizes = part.sizes.astype(np.int64)
    nonzero = np.bincount(part.labels[m.row_cells(g)], minlength=k)
    observed = np.stack([nonzero, sizes - nonzero])
    exp_nonzero = np.bincount(part.labels, weights=rho.rho[g], minlength=k)
    expected = np.stack([exp_nonzero, sizes - exp_nonzero])
    denom = np.maximum(1.0, expected)
    w = float(np.sum((observed - expected) ** 2 / denom))
    dof = k - 1
    return DiffExpResult(
        w=w, dof=dof, p_value=float(chi2_sf(w, dof)), observed=observed, expected=expected
    )


@dataclass(frozen=True)
class GdiScore:
    """Per-gene high percentile of squared indices and its gdi rescaling."""

    s: np.ndarray
    gdi: np.ndarray
    alpha: float


def _top_rank_size(n_genes: int, alpha: float) -> int:
    """Buffer size for the nearest-rank (1-alpha) percentile of n-1 values."""
    n_vals = n_genes - 1
    rank = math.ceil((1.0 - alpha) * n_vals - 1e-9)
    rank = min(max(rank, 1), n_vals)
    return n_vals - rank + 1


def nearest_rank_percentile(values: np.ndarray, alpha: float) -> float:
    """Full-sort reference: value at rank ceil((1-alpha)*len) (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = math.ceil((1.0 - alpha) * v.size - 1e-9)
    rank = min(max(rank, 1), v.size)
    return float(v[rank - 1])


class _TopBuffer:
    """Bounded per-gene buffers keeping the t largest incoming values.

    After each merge, position 0 of a row holds the smallest retained
    value, i.e. the nearest-rank percentile once the stream completes.
    """

    def __init__(self, n_genes: int, size: int):
        self.size = size
        self.tops = np.full((n_genes, size), -np.inf)

    def update(self, gene: int, values: np.ndarray):
        merged = np.concatenate([self.tops[gene], values])
        if merged.size > self.size:
            merged = np.partition(merged, merged.size - self.size)[-self.size:]
        self.tops[gene] = merged

    def result(self) -> np.ndarray:
        return self.tops[:, 0].copy()


def _grouped_update(buf: _TopBuffer, genes: np.ndarray, values: np.ndarray):
    order = np.argsort(genes, kind="stable")
    genes = genes[order]
    values = values[order]
    bounds = np.flatnonzero(np.diff(genes)) + 1
    for chunk_genes, chunk_vals in zip(
        np.split(genes, bounds), np.split(values, bounds)
    ):
        buf.update(int(chunk_genes[0]), chunk_vals)


def gdi_scores(results, n_genes: int, alpha: float = 1e-3, floor: float = GDI_FLOOR) -> GdiScore:
    """Differentiation scores from a complete stream of pair results.

    ``results`` yields PairBlock chunks or (g1, g2, r) tuples covering
    every unordered pair exactly once; each pair contributes its squared
    index to both genes.  An incomplete or overfull stream is an error.
    """
    if n_genes < 2:
        raise ValueError("need at least 2 genes")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    buf = _TopBuffer(n_genes, _top_rank_size(n_genes, alpha))
    seen = 0
    for item in results:
        if isinstance(item, PairBlock):
            g1, g2, r2 = item.g1, item.g2, item.r**2
        else:
            a, b, r = item
            g1 = np.array([a], dtype=np.int64)
            g2 = np.array([b], dtype=np.int64)
            r2 = np.array([float(r) ** 2])
        seen += g1.size
        _grouped_update(buf, g1, r2)
        _grouped_update(buf, g2, r2)
    expected_pairs = pair_count(n_genes)
    if seen != expected_pairs:
        raise ValueError(f"pair stream had {seen} results, expected {expected_pairs}")
    s = buf.result()
    gdi = gdi_transform(s, floor=floor)
    return GdiScore(s=s, gdi=gdi, alpha=alpha)


def gdi_transform(s, floor: float = GDI_FLOOR):
    """log(-log survival) of chi-square(1) at ``s``; floor at s = 0.

    Evaluated through the log-survival function so the value stays
    finite and strictly increasing arbitrarily far into the tail.
    """
    scalar = np.ndim(s) == 0
    arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
    out = np.full(arr.shape, float(floor))
    pos = arr > 0.0
    if pos.any():
        out[pos] = np.log(-chi2_log_sf(arr[pos], 1))
    return float(out[0]) if scalar else out


def gdi_threshold_test(scores: GdiScore, quantile: float = 1e-4) -> np.ndarray:
    """Flag genes whose score exceeds the chi-square(1) upper quantile."""
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must be in (0, 1)")
    return scores.s > float(chi2_isf(quantile, 1))
