"""Synthetic count matrices from the generative model, with ground truth.

Each cell draws a latent expression level per gene (gamma with the
configured mean and relative variance, degenerate when the dispersion is
0) and then Poisson counts scaled by its efficiency.  Randomness is
counter-based: every cell owns a Philox stream keyed by (seed, cell), so
the output is bit-identical however the work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimation import ModelParams
from .matrix import CountMatrix, from_coo, marginals
from .zeromodel import DispersionFit

__all__ = [
    "ClusterSpec",
    "SynthConfig",
    "GroundTruth",
    "generate",
    "zero_rate_check",
    "fit_cluster_params",
    "default_null_config",
    "default_cluster_config",
]

_MASK64 = (1 << 64) - 1
#: Stream ids: 0 draws efficiencies, 1 + c draws cell c, parameter
#: streams for config builders start at 1 << 32 (cell counts stay below).
_NU_STREAM = 0
_CELL_STREAM_BASE = 1
_PARAM_STREAM_BASE = 1 << 32


def _stream(seed: int, stream_id: int) -> np.random.Generator:
    # raw 128-bit key (seed word, stream word); cheaper than a python
    # bigint and bit-identical to key=(stream_id << 64) | seed
    key = np.array([seed & _MASK64, stream_id & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class _StreamPool:
    """One reusable Generator rekeyed per stream id.

    Avoids constructing a Philox + Generator pair for every cell; the
    draws are bit-identical to a freshly keyed ``_stream`` generator.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & _MASK64)
        self._bg = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        self._gen = np.random.Generator(self._bg)
        self._state = self._bg.state

    def get(self, stream_id: int) -> np.random.Generator:
        st = self._state
        st["state"]["key"] = np.array([self._seed, stream_id], dtype=np.uint64)
        st["state"]["counter"] = np.zeros(4, dtype=np.uint64)
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bg.state = st
        return self._gen


@dataclass(frozen=True)
class ClusterSpec:
    """One cell population: size plus per-gene mean and dispersion."""

    n_cells: int
    lam: np.ndarray
    disp: np.ndarray

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("cluster must contain at least one cell")
        if self.lam.shape != self.disp.shape:
            raise ValueError("lam and disp must have matching shapes")
        if np.any(self.lam < 0):
            raise ValueError("expression means must be non-negative")
        if np.any(self.disp < 0):
            raise ValueError("generation requires dispersion >= 0")


@dataclass(frozen=True)
class SynthConfig:
    """Generative parameters; efficiencies come from an explicit list or
    a log-normal law, and are rescaled to mean 1 after drawing."""

    clusters: tuple[ClusterSpec, ...]
    seed: int = 0
    nu_log_sd: float = 0.4
    nu_values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.clusters:
            raise ValueError("need at least one cluster")
        n = self.clusters[0].lam.size
        if any(c.lam.size != n for c in self.clusters):
            raise ValueError("clusters disagree on the gene count")
        if self.nu_values is not None:
            if self.nu_values.size != self.n_cells:
                raise ValueError("explicit efficiencies must cover every cell")
            if np.any(self.nu_values <= 0):
                raise ValueError("efficiencies must be positive")
        elif self.nu_log_sd < 0:
            raise ValueError("nu_log_sd must be >= 0")

    @property
    def n_genes(self) -> int:
        return self.clusters[0].lam.size

    @property
    def n_cells(self) -> int:
        return sum(c.n_cells for c in self.clusters)


@dataclass(frozen=True)
class GroundTruth:
    """Realized efficiencies and the per-cluster generative parameters."""

    nu: np.ndarray
    cluster_of: np.ndarray
    lam: np.ndarray  # clusters x genes
    disp: np.ndarray  # clusters x genes

    def lam_of_cells(self) -> np.ndarray:
        """Genes x cells matrix of each cell's generative mean."""
        return self.lam[self.cluster_of].T

    def mu(self) -> np.ndarray:
        """Genes x cells expected counts nu_c * lam_{g, cluster(c)}."""
        return self.lam_of_cells() * self.nu[None, :]


def generate(config: SynthConfig) -> tuple[CountMatrix, GroundTruth]:
    """Draw a count matrix and return it with its ground truth.

    Per cell: gamma latent levels (shape 1/a, scale a*lam) for genes with
    positive dispersion, the constant mean otherwise, then Poisson counts
    at rate nu_c * level.  Reproducible from the seed alone.
    """
    n, m = config.n_genes, config.n_cells
    if config.nu_values is not None:
        nu = config.nu_values.astype(np.float64).copy()
    else:
        rng = _stream(config.seed, _NU_STREAM)
        nu = rng.lognormal(mean=0.0, sigma=config.nu_log_sd, size=m)
    nu /= nu.mean()

    cluster_of = np.repeat(
        np.arange(len(config.clusters)), [c.n_cells for c in config.clusters]
    )
    # per-cluster constants hoisted out of the cell loop
    prepared = []
    for spec in config.clusters:
        mixed = np.flatnonzero(spec.disp > 0.0)
        prepared.append(
            (
                spec.lam.astype(np.float64),
                mixed,
                1.0 / spec.disp[mixed],
                spec.disp[mixed] * spec.lam[mixed],
            )
        )
    rows, cols, vals = [], [], []
    pool = _StreamPool(config.seed)
    for c in range(m):
        lam, mixed, shape, scale = prepared[cluster_of[c]]
        rng = pool.get(_CELL_STREAM_BASE + c)
        level = lam.copy()
        if mixed.size:
            level[mixed] = rng.gamma(shape=shape, scale=scale)
        counts = rng.poisson(nu[c] * level)
        nz = np.flatnonzero(counts)
        rows.append(nz)
        cols.append(np.full(nz.size, c, dtype=np.int64))
        vals.append(counts[nz])

    # id scheme matches what the MatrixMarket loader synthesizes, so ids
    # survive a round trip through .mtx files
    matrix = from_coo(
        tuple(f"g{i + 1}" for i in range(n)),
        tuple(f"c{j + 1}" for j in range(m)),
        np.concatenate(rows) if rows else np.empty(0, dtype=np.int64),
        np.concatenate(cols) if cols else np.empty(0, dtype=np.int64),
        np.concatenate(vals) if vals else np.empty(0, dtype=np.int64),
    )
    truth = GroundTruth(
        nu=nu,
        cluster_of=cluster_of,
        lam=np.stack([c.lam for c in config.clusters]),
        disp=np.stack([c.disp for c in config.clusters]),
    )
    return matrix, truth


def zero_prob(mu, disp):
    """Model probability of zero reads at expected count mu, dispersion a."""
    mu = np.asarray(mu, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    with np.errstate(divide="ignore", under="ignore"):
        gamma_form = np.power(1.0 + disp * mu, -1.0 / np.where(disp > 0, disp, 1.0))
        poisson_form = np.exp(-mu)
    return np.where(disp > 0, gamma_form, poisson_form)


def zero_rate_check(truth: GroundTruth, matrix: CountMatrix):
    """Per-gene (expected, observed) zero fractions under the ground truth."""
    stats = marginals(matrix)
    m = matrix.n_cells
    disp_cells = truth.disp[truth.cluster_of].T  # genes x cells
    expected = zero_prob(truth.mu(), disp_cells).mean(axis=1)
    observed = stats.gene.zero_cells / m
    return expected, observed


def fit_cluster_params(
    m: CountMatrix,
    labels,
    params_of,
    fit_of,
    seed: int = 0,
) -> tuple[SynthConfig, np.ndarray]:
    """Moment-based generative config from clustered data.

    ``params_of`` and ``fit_of`` map a column-subset CountMatrix to
    ModelParams and a DispersionFit (typically the estimators of this
    package).  Negative fitted dispersions are floored at 0 for
    generation; the returned mask flags them per cluster x gene.
    """
    labels = np.asarray(labels)
    if labels.size != m.n_cells:
        raise ValueError("labels must cover every cell")
    names = np.unique(labels)
    clusters = []
    floored = []
    for name in names:
        cells = np.flatnonzero(labels == name)
        sub = m.column_subset(cells)
        if marginals(sub).grand_total == 0:
            raise ValueError(f"cluster {name!r} has no counts")
        params: ModelParams = params_of(sub)
        fit: DispersionFit = fit_of(sub, params)
        disp = np.where(fit.fitted, fit.a, 0.0)
        neg = fit.fitted & (disp < 0.0)
        clusters.append(
            ClusterSpec(
                n_cells=cells.size,
                lam=params.lam.copy(),
                disp=np.where(neg, 0.0, disp),
            )
        )
        floored.append(neg)
    return (
        SynthConfig(clusters=tuple(clusters), seed=seed),
        np.stack(floored),
    )


def default_null_config(
    n_genes: int = 2000, n_cells: int = 800, seed: int = 0
) -> SynthConfig:
    """Homogeneous (single-population) benchmark configuration.

    Expression means are log-uniform on [0.1, 6], dispersions uniform on
    [0.03, 0.8]; both ranges keep genes away from the all-zero and
    never-zero extremes at a few hundred cells while spanning sparse and
    saturated regimes.
    """
    rng = _stream(seed, _PARAM_STREAM_BASE)
    lam = np.exp(rng.uniform(np.log(0.1), np.log(6.0), size=n_genes))
    disp = rng.uniform(0.03, 0.8, size=n_genes)
    return SynthConfig(
        clusters=(ClusterSpec(n_cells=n_cells, lam=lam, disp=disp),),
        seed=seed,
    )


def default_cluster_config(
    n_genes: int = 2000,
    n_cells: int = 800,
    n_clusters: int = 4,
    seed: int = 0,
) -> SynthConfig:
    """Differentiated benchmark: clusters share the null parameters but
    silence a random fifth of the genes each (mean scaled by 1/20)."""
    base = default_null_config(n_genes, n_cells, seed)
    lam, disp = base.clusters[0].lam, base.clusters[0].disp
    rng = _stream(seed, _PARAM_STREAM_BASE + 1)
    sizes = np.full(n_clusters, n_cells // n_clusters)
    sizes[: n_cells % n_clusters] += 1
    clusters = []
    for j in range(n_clusters):
        silenced = rng.random(n_genes) < 0.2
        lam_j = np.where(silenced, lam / 20.0, lam)
        clusters.append(ClusterSpec(n_cells=int(sizes[j]), lam=lam_j, disp=disp))
    return SynthConfig(clusters=tuple(clusters), seed=seed)
