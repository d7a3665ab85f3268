"""Read-count matrix container and file formats.

Counts are stored sparsely, row-major by gene (the whole pipeline walks
genes over cells), with exact integer arithmetic for all marginal sums.
Two interchange formats are supported: MatrixMarket coordinate integer
files and dense TSV with gene rows and cell columns.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CountMatrix",
    "GeneMarginals",
    "Marginals",
    "MatrixFormatError",
    "load_matrix_market",
    "write_matrix_market",
    "load_dense_tsv",
    "write_dense_tsv",
    "load_counts",
    "marginals",
    "filter_genes",
]

MM_BANNER = "%%MatrixMarket matrix coordinate integer general"


class MatrixFormatError(ValueError):
    """Malformed input file; carries the 1-based offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class CountMatrix:
    """Genes x cells non-negative integer counts, sparse by gene row.

    Stored entries are strictly positive; absent entries are exactly 0.
    Immutable after construction and safe to share between workers.
    """

    gene_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]
    indptr: np.ndarray = field(repr=False)  # int64, len n_genes + 1
    cell_index: np.ndarray = field(repr=False)  # int32, sorted within each row
    values: np.ndarray = field(repr=False)  # int64, all >= 1

    def __post_init__(self):
        if len(set(self.gene_ids)) != len(self.gene_ids):
            raise ValueError("duplicate gene ids")
        if len(set(self.cell_ids)) != len(self.cell_ids):
            raise ValueError("duplicate cell ids")
        if self.indptr.shape != (len(self.gene_ids) + 1,):
            raise ValueError("indptr length does not match gene count")
        if np.any(self.values < 1):
            raise ValueError("stored counts must be >= 1")

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def row(self, g: int):
        """(cell indices, counts) of the stored entries of gene ``g``."""
        lo, hi = self.indptr[g], self.indptr[g + 1]
        return self.cell_index[lo:hi], self.values[lo:hi]

    def row_cells(self, g: int) -> np.ndarray:
        lo, hi = self.indptr[g], self.indptr[g + 1]
        return self.cell_index[lo:hi]

    def to_dense(self) -> np.ndarray:
        """Dense int64 copy; intended for tests and tiny matrices only."""
        out = np.zeros((self.n_genes, self.n_cells), dtype=np.int64)
        for g in range(self.n_genes):
            cols, vals = self.row(g)
            out[g, cols] = vals
        return out

    def column_subset(self, cells: np.ndarray, cell_ids=None) -> "CountMatrix":
        """New matrix restricted to the given cell positions (reindexed)."""
        cells = np.asarray(cells, dtype=np.int64)
        remap = -np.ones(self.n_cells, dtype=np.int64)
        remap[cells] = np.arange(cells.size)
        keep = remap[self.cell_index] >= 0
        rows = np.repeat(np.arange(self.n_genes), np.diff(self.indptr))[keep]
        cols = remap[self.cell_index[keep]]
        if cell_ids is None:
            cell_ids = tuple(self.cell_ids[c] for c in cells)
        return from_coo(
            self.gene_ids, tuple(cell_ids), rows, cols, self.values[keep]
        )


def from_coo(gene_ids, cell_ids, rows, cols, vals) -> CountMatrix:
    """Build a CountMatrix from coordinate data (zeros dropped, rows sorted)."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.int64)
    keep = vals != 0
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    n = len(gene_ids)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return CountMatrix(
        tuple(gene_ids), tuple(cell_ids), indptr, cols.astype(np.int32), vals
    )


@dataclass(frozen=True)
class GeneMarginals:
    """Per-gene totals and zero/nonzero cell counts (exact integers)."""

    row_sum: np.ndarray
    nonzero_cells: np.ndarray
    zero_cells: np.ndarray


@dataclass(frozen=True)
class Marginals:
    gene: GeneMarginals
    cell_total: np.ndarray
    grand_total: int


def marginals(m: CountMatrix) -> Marginals:
    """Row sums, column sums and grand total in integer arithmetic."""
    row_sum = np.zeros(m.n_genes, dtype=np.int64)
    if m.nnz:
        rows = np.repeat(np.arange(m.n_genes), np.diff(m.indptr))
        np.add.at(row_sum, rows, m.values)
    cell_total = np.zeros(m.n_cells, dtype=np.int64)
    if m.nnz:
        np.add.at(cell_total, m.cell_index, m.values)
    nonzero = np.diff(m.indptr)
    return Marginals(
        gene=GeneMarginals(
            row_sum=row_sum,
            nonzero_cells=nonzero,
            zero_cells=m.n_cells - nonzero,
        ),
        cell_total=cell_total,
        grand_total=int(row_sum.sum()),
    )


def filter_genes(m: CountMatrix, min_total: int = 1):
    """Drop genes whose total count is below ``min_total``.

    Returns the filtered matrix and the original positions of the kept
    genes.  Removing every gene is a warning, not an error.
    """
    if min_total < 1:
        raise ValueError("min_total must be >= 1")
    row_sum = marginals(m).gene.row_sum
    kept = np.flatnonzero(row_sum >= min_total)
    if kept.size == 0:
        warnings.warn("gene filter removed every gene", stacklevel=2)
    if kept.size == m.n_genes:
        return m, kept
    remap = -np.ones(m.n_genes, dtype=np.int64)
    remap[kept] = np.arange(kept.size)
    rows = np.repeat(np.arange(m.n_genes), np.diff(m.indptr))
    keep_entry = remap[rows] >= 0
    out = from_coo(
        tuple(m.gene_ids[g] for g in kept),
        m.cell_ids,
        remap[rows[keep_entry]],
        m.cell_index[keep_entry],
        m.values[keep_entry],
    )
    return out, kept


def load_matrix_market(path) -> CountMatrix:
    """Read a MatrixMarket coordinate integer file (1-based indices).

    Duplicate coordinates are rejected rather than summed; every error
    reports the offending line number.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise MatrixFormatError("empty file", 1)
    banner = lines[0].strip().split()
    expected = MM_BANNER.split()
    if [t.lower() for t in banner] != [t.lower() for t in expected]:
        raise MatrixFormatError(
            f"unsupported MatrixMarket banner (need '{MM_BANNER}')", 1
        )
    ln = 1
    dims = None
    for i in range(1, len(lines)):
        ln = i + 1
        text = lines[i].strip()
        if not text or text.startswith("%"):
            continue
        dims = text.split()
        break
    if dims is None:
        raise MatrixFormatError("missing dimensions line", ln)
    if len(dims) != 3:
        raise MatrixFormatError("dimensions line must have 3 fields", ln)
    try:
        n, m, nnz = (int(t) for t in dims)
    except ValueError:
        raise MatrixFormatError("non-integer dimensions", ln) from None
    if n < 0 or m < 0 or nnz < 0:
        raise MatrixFormatError("negative dimension", ln)
    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.int64)
    found = 0
    for i in range(ln, len(lines)):
        text = lines[i].strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        if len(parts) != 3:
            raise MatrixFormatError("entry must have 3 fields", i + 1)
        try:
            r, c, v = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError:
            raise MatrixFormatError(f"non-integer entry {text!r}", i + 1) from None
        if v < 0:
            raise MatrixFormatError(f"negative count {v}", i + 1)
        if not (1 <= r <= n) or not (1 <= c <= m):
            raise MatrixFormatError(f"index ({r}, {c}) out of range", i + 1)
        if found >= nnz:
            raise MatrixFormatError("more entries than declared", i + 1)
        rows[found], cols[found], vals[found] = r - 1, c - 1, v
        found += 1
    if found != nnz:
        raise MatrixFormatError(
            f"declared {nnz} entries but found {found}", len(lines)
        )
    if nnz:
        flat = rows * m + cols
        uniq, first = np.unique(flat, return_index=True)
        if uniq.size != nnz:
            mask = np.ones(nnz, dtype=bool)
            mask[first] = False
            dup = int(np.flatnonzero(mask)[0])
            raise MatrixFormatError(
                f"duplicate entry ({rows[dup] + 1}, {cols[dup] + 1})",
                _entry_line(lines, ln, dup),
            )
    gene_ids = tuple(f"g{i + 1}" for i in range(n))
    cell_ids = tuple(f"c{j + 1}" for j in range(m))
    return from_coo(gene_ids, cell_ids, rows, cols, vals)


def _entry_line(lines, header_end, entry_pos):
    """1-based file line of the entry at position ``entry_pos``."""
    seen = -1
    for i in range(header_end, len(lines)):
        text = lines[i].strip()
        if not text or text.startswith("%"):
            continue
        seen += 1
        if seen == entry_pos:
            return i + 1
    return len(lines)


def write_matrix_market(m: CountMatrix, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(MM_BANNER + "\n")
        fh.write(f"{m.n_genes} {m.n_cells} {m.nnz}\n")
        for g in range(m.n_genes):
            cols, vals = m.row(g)
            for c, v in zip(cols, vals):
                fh.write(f"{g + 1} {c + 1} {v}\n")


def load_dense_tsv(path) -> CountMatrix:
    """Read a dense TSV: header row of cell ids, gene id first column.

    The header may optionally start with a corner label.  Zeros are not
    stored.  Non-integer tokens and ragged rows are errors.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise MatrixFormatError("empty file", 1)
    header = lines[0].split("\t") if "\t" in lines[0] else lines[0].split()
    if len(lines) == 1:
        raise MatrixFormatError("no gene rows", 1)
    first_body = lines[1].split("\t") if "\t" in lines[1] else lines[1].split()
    if len(first_body) == len(header) + 1:
        cell_ids = header
    elif len(first_body) == len(header):
        cell_ids = header[1:]
    else:
        raise MatrixFormatError(
            f"row has {len(first_body)} fields, header implies "
            f"{len(header)} or {len(header) + 1}",
            2,
        )
    m_cells = len(cell_ids)
    gene_ids = []
    rows, cols, vals = [], [], []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != m_cells + 1:
            raise MatrixFormatError(
                f"ragged row: {len(parts)} fields, expected {m_cells + 1}", i
            )
        gene_ids.append(parts[0])
        for j, tok in enumerate(parts[1:]):
            try:
                v = int(tok)
            except ValueError:
                raise MatrixFormatError(f"non-integer count {tok!r}", i) from None
            if v < 0:
                raise MatrixFormatError(f"negative count {v}", i)
            if v:
                rows.append(len(gene_ids) - 1)
                cols.append(j)
                vals.append(v)
    return from_coo(tuple(gene_ids), tuple(cell_ids), rows, cols, vals)


def write_dense_tsv(m: CountMatrix, path) -> None:
    path = Path(path)
    dense = m.to_dense()
    with path.open("w", encoding="utf-8") as fh:
        fh.write("gene\t" + "\t".join(m.cell_ids) + "\n")
        for g in range(m.n_genes):
            fh.write(m.gene_ids[g] + "\t" + "\t".join(str(v) for v in dense[g]) + "\n")


def load_counts(path, fmt: str | None = None) -> CountMatrix:
    """Load a count matrix, choosing the parser by extension or ``fmt``."""
    path = Path(path)
    if fmt is None:
        fmt = "mtx" if path.suffix.lower() in (".mtx", ".mm") else "tsv"
    if fmt == "mtx":
        return load_matrix_market(path)
    if fmt == "tsv":
        return load_dense_tsv(path)
    raise ValueError(f"unknown matrix format {fmt!r}")
