"""Co-expression tables, test statistics and the all-pairs engine.

For a pair of genes, cells are cross-classified by zero/nonzero read
count into a 2x2 table of observed counts; the expected counts under
independence come from the per-cell chances of expression rather than
from marginal products, which removes the spurious association created
by unequal cell efficiencies.  The deviation statistic ``w`` is
chi-square(1) distributed under independence and its signed square root
``r`` plays the role of a correlation.

The all-pairs engine processes gene tiles: joint nonzero counts via
bit-packed rows (AND + popcount) and expected joint counts via blocked
row products.  Per-pair numbers are bit-identical to the single-pair
functions because every reduction runs over the same contiguous axis.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .matrix import CountMatrix
from .sqrtpoisson import chi2_sf
from .zeromodel import RhoMatrix

__all__ = [
    "CoexTable",
    "CoexResult",
    "PairBlock",
    "observed_table",
    "expected_table",
    "classical_expected",
    "coex_stats",
    "pairwise_coex",
    "pair_count",
]


@dataclass(frozen=True)
class CoexTable:
    """Observed and expected 2x2 cell counts for one gene pair.

    Index order is (first gene, second gene) with 1 = expressed:
    ``o11`` counts cells where both genes have reads, ``o10`` cells
    where only the first does, and so on.  Both tables sum to ``m``.
    """

    o11: int
    o10: int
    o01: int
    o00: int
    e11: float
    e10: float
    e01: float
    e00: float
    m: int

    def observed(self):
        return self.o11, self.o10, self.o01, self.o00

    def expected(self):
        return self.e11, self.e10, self.e01, self.e00


@dataclass(frozen=True)
class CoexResult:
    """Deviation statistic, signed index and chi-square(1) p-value."""

    w: float
    r: float
    p_value: float


def observed_table(m: CountMatrix, g1: int, g2: int) -> tuple[int, int, int, int]:
    """Exact observed 2x2 counts for two distinct genes.

    The joint count comes from a sorted-row intersection; the rest
    follow from the per-gene nonzero counts and the cell total.
    """
    if g1 == g2:
        raise ValueError("co-expression of a gene with itself is degenerate")
    c1 = m.row_cells(g1)
    c2 = m.row_cells(g2)
    o11 = int(np.intersect1d(c1, c2, assume_unique=True).size)
    o10 = int(c1.size) - o11
    o01 = int(c2.size) - o11
    o00 = m.n_cells - int(c1.size) - int(c2.size) + o11
    return o11, o10, o01, o00


def _joint_expected(rho_a, rho_b):
    """Sum over cells of the product of expression chances.

    Keeps one reduction code path (contiguous last axis) for both the
    single-pair call and the engine's row blocks, so results match
    bitwise.
    """
    return np.sum(rho_a * rho_b, axis=-1)


def expected_table(rho: RhoMatrix, g1: int, g2: int) -> tuple[float, float, float, float]:
    """Expected 2x2 counts under independence of expression."""
    if g1 == g2:
        raise ValueError("co-expression of a gene with itself is degenerate")
    r1 = rho.rho[g1]
    r2 = rho.rho[g2]
    e11 = float(_joint_expected(r1, r2))
    s1 = float(np.sum(r1, axis=-1))
    s2 = float(np.sum(r2, axis=-1))
    m = float(rho.n_cells)
    e10 = s1 - e11
    e01 = s2 - e11
    e00 = m - s1 - s2 + e11
    return e11, e10, e01, e00


def make_table(m: CountMatrix, rho: RhoMatrix, g1: int, g2: int) -> CoexTable:
    o11, o10, o01, o00 = observed_table(m, g1, g2)
    e11, e10, e01, e00 = expected_table(rho, g1, g2)
    return CoexTable(o11, o10, o01, o00, e11, e10, e01, e00, m.n_cells)


def classical_expected(row_marginals, col_marginals, m: int):
    """Marginal-product expected counts (diagnostic comparison only).

    ``row_marginals`` are the (nonzero, zero) totals of the first gene,
    ``col_marginals`` of the second.
    """
    r1, r0 = row_marginals
    c1, c0 = col_marginals
    if not math.isclose(r1 + r0, m, rel_tol=0, abs_tol=1e-9 * max(m, 1)):
        raise ValueError("row marginals do not sum to the cell total")
    if not math.isclose(c1 + c0, m, rel_tol=0, abs_tol=1e-9 * max(m, 1)):
        raise ValueError("column marginals do not sum to the cell total")
    return (r1 * c1 / m, r1 * c0 / m, r0 * c1 / m, r0 * c0 / m)


def _w_r_p(o11, o10, o01, o00, e11, e10, e01, e00):
    """Deviation statistic, signed index and p-value; scalar or array.

    Expected counts below 1 are clamped in the denominators so that
    near-empty cells cannot blow up the statistic.
    """
    d11 = np.maximum(1.0, e11)
    d10 = np.maximum(1.0, e10)
    d01 = np.maximum(1.0, e01)
    d00 = np.maximum(1.0, e00)
    z11 = o11 - e11
    z10 = o10 - e10
    z01 = o01 - e01
    z00 = o00 - e00
    w = z11 * z11 / d11 + z10 * z10 / d10 + z01 * z01 / d01 + z00 * z00 / d00
    inv = 1.0 / d11 + 1.0 / d10 + 1.0 / d01 + 1.0 / d00
    signed = z11 / d11 - z10 / d10 - z01 / d01 + z00 / d00
    r = signed / np.sqrt(inv)
    p = chi2_sf(w, 1)
    return w, r, p


def coex_stats(table: CoexTable) -> CoexResult:
    """Statistics for one pair; positive ``r`` means co-expression."""
    w, r, p = _w_r_p(*table.observed(), *table.expected())
    return CoexResult(w=float(w), r=float(r), p_value=float(p))


@dataclass(frozen=True)
class PairBlock:
    """A chunk of pair results emitted by the all-pairs engine."""

    g1: np.ndarray
    g2: np.ndarray
    o11: np.ndarray
    o10: np.ndarray
    o01: np.ndarray
    o00: np.ndarray
    e11: np.ndarray
    e10: np.ndarray
    e01: np.ndarray
    e00: np.ndarray
    w: np.ndarray
    r: np.ndarray
    p: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.g1.size


def pair_count(n_genes: int) -> int:
    return n_genes * (n_genes - 1) // 2


def _pack_rows(m: CountMatrix) -> np.ndarray:
    """Bit-packed presence masks, one row of bytes per gene."""
    bits = np.zeros((m.n_genes, m.n_cells), dtype=np.uint8)
    for g in range(m.n_genes):
        bits[g, m.row_cells(g)] = 1
    return np.packbits(bits, axis=1)


def _tile_block(bits, rho_rows, nnz, rho_sums, m_cells, i_idx, j_idx, same):
    """All pair statistics for one tile pair (row tile x column tile)."""
    ta, tb = i_idx.size, j_idx.size
    o11 = np.empty((ta, tb), dtype=np.int64)
    e11 = np.empty((ta, tb), dtype=np.float64)
    bits_j = bits[j_idx]
    rho_j = rho_rows[j_idx]
    for k in range(ta):
        o11[k] = np.sum(
            np.bitwise_count(bits[i_idx[k]] & bits_j), axis=-1, dtype=np.int64
        )
        e11[k] = _joint_expected(rho_rows[i_idx[k]][None, :], rho_j)

    n1 = nnz[i_idx][:, None]
    n2 = nnz[j_idx][None, :]
    o10 = n1 - o11
    o01 = n2 - o11
    o00 = m_cells - n1 - n2 + o11
    s1 = rho_sums[i_idx][:, None]
    s2 = rho_sums[j_idx][None, :]
    e10 = s1 - e11
    e01 = s2 - e11
    e00 = float(m_cells) - s1 - s2 + e11

    if same:
        keep = np.triu(np.ones((ta, tb), dtype=bool), k=1)
    else:
        keep = np.ones((ta, tb), dtype=bool)
    gg1 = np.broadcast_to(i_idx[:, None], (ta, tb))[keep]
    gg2 = np.broadcast_to(j_idx[None, :], (ta, tb))[keep]
    w, r, p = _w_r_p(
        o11[keep], o10[keep], o01[keep], o00[keep],
        e11[keep], e10[keep], e01[keep], e00[keep],
    )
    return PairBlock(
        g1=gg1.astype(np.int32),
        g2=gg2.astype(np.int32),
        o11=o11[keep], o10=o10[keep], o01=o01[keep], o00=o00[keep],
        e11=e11[keep], e10=e10[keep], e01=e01[keep], e00=e00[keep],
        w=w, r=r, p=p,
    )


def pairwise_coex(m: CountMatrix, rho: RhoMatrix, tile: int = 256, threads: int = 1):
    """Stream statistics for every unordered gene pair exactly once.

    Yields PairBlock chunks; per-pair values equal the single-pair
    functions bitwise.  Emission order is deterministic with one thread
    and unspecified otherwise; consumers must not rely on it.
    """
    if m.n_genes != rho.n_genes or m.n_cells != rho.n_cells:
        raise ValueError("count matrix and rho matrix are misaligned")
    if tile < 1:
        raise ValueError("tile size must be >= 1")
    n = m.n_genes
    if n < 2:
        return
    bits = _pack_rows(m)
    nnz = np.diff(m.indptr)
    rho_sums = rho.gene_sums()
    starts = list(range(0, n, tile))
    tasks = []
    for a, sa in enumerate(starts):
        ia = np.arange(sa, min(sa + tile, n))
        for sb in starts[a:]:
            ib = np.arange(sb, min(sb + tile, n))
            tasks.append((ia, ib, sa == sb))

    def run(task):
        ia, ib, same = task
        return _tile_block(bits, rho.rho, nnz, rho_sums, m.n_cells, ia, ib, same)

    if threads <= 1:
        for task in tasks:
            yield run(task)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run, t) for t in tasks]
            for fut in futures:
                yield fut.result()


def pairwise_subset(m: CountMatrix, rho: RhoMatrix, pairs):
    """Single-pair path over an explicit list of (g1, g2) index pairs."""
    for g1, g2 in pairs:
        table = make_table(m, rho, int(g1), int(g2))
        yield int(g1), int(g2), table, coex_stats(table)
