"""Report emission: tidy CSV plot data plus rendered figures.

Each report kind writes a small CSV that any plotting tool can consume
and, unless disabled, a matching PNG rendered with matplotlib.  The
p-value ECDF optionally subsamples large result sets before plotting.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .sqrtpoisson import chi2_isf

__all__ = ["emit_pvalue_ecdf", "emit_gdi_hist", "emit_estimator_scatter", "PLOT_KINDS"]

PLOT_KINDS = ("pvalue-ecdf", "gdi-hist", "estimator-scatter")

MAX_ECDF_POINTS = 1_000_000


def _finish_figure(fig, png_path):
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def emit_pvalue_ecdf(pvalues, csv_path, png_path=None, max_points=MAX_ECDF_POINTS, seed=0):
    """Empirical CDF of test p-values against the uniform diagonal."""
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no p-values to plot")
    if p.size > max_points:
        rng = np.random.default_rng(seed)
        p = p[rng.choice(p.size, size=max_points, replace=False)]
    p = np.sort(p)
    # thin the curve for the file: the ECDF at 2000 grid points
    grid = np.linspace(0, 1, 2001)
    ecdf = np.searchsorted(p, grid, side="right") / p.size
    with Path(csv_path).open("w", encoding="utf-8") as fh:
        fh.write("x,y,series\n")
        for x, v in zip(grid, ecdf):
            fh.write(f"{x:.6g},{v:.6g},ecdf\n")
        fh.write("0,0,diagonal\n1,1,diagonal\n")
    if png_path is not None:
        fig, axes = plt.subplots(1, 2, figsize=(9, 4))
        for ax in axes:
            ax.plot(grid, ecdf, lw=1.2, label="empirical")
            ax.plot([1e-7, 1], [1e-7, 1], "k--", lw=0.8, label="uniform")
            ax.set_xlabel("p-value")
            ax.set_ylabel("ECDF")
        axes[1].set_xscale("log")
        axes[1].set_yscale("log")
        axes[1].set_xlim(1e-5, 1)
        axes[1].set_ylim(1e-5, 1)
        axes[0].legend(frameon=False)
        _finish_figure(fig, png_path)
    return csv_path


def emit_gdi_hist(gdi_values, csv_path, png_path=None, bins=60, quantile=1e-4):
    """Histogram of differentiation scores with the test threshold."""
    g = np.asarray(gdi_values, dtype=np.float64)
    with Path(csv_path).open("w", encoding="utf-8") as fh:
        fh.write("x,y,series\n")
        if g.size:
            counts, edges = np.histogram(g, bins=bins)
            centers = 0.5 * (edges[:-1] + edges[1:])
            for x, y in zip(centers, counts):
                fh.write(f"{x:.6g},{y},gdi\n")
    if png_path is not None:
        from .downstream import gdi_transform

        fig, ax = plt.subplots(figsize=(6, 4))
        if g.size:
            ax.hist(g, bins=bins, color="#4477aa", alpha=0.85)
        line = gdi_transform(float(chi2_isf(quantile, 1)))
        ax.axvline(line, color="crimson", ls="--", lw=1.0, label=f"threshold {line:.3f}")
        ax.set_xlabel("gdi")
        ax.set_ylabel("genes")
        ax.legend(frameon=False)
        _finish_figure(fig, png_path)
    return csv_path


def emit_estimator_scatter(true_values, estimated_values, kinds, csv_path, png_path=None):
    """True vs estimated parameter values, one row per parameter."""
    t = np.asarray(true_values, dtype=np.float64)
    e = np.asarray(estimated_values, dtype=np.float64)
    kinds = np.asarray(kinds)
    if not (t.size == e.size == kinds.size):
        raise ValueError("true, estimated and kind columns must align")
    with Path(csv_path).open("w", encoding="utf-8") as fh:
        fh.write("true,estimated,kind\n")
        for tv, ev, kv in zip(t, e, kinds):
            fh.write(f"{tv:.8g},{ev:.8g},{kv}\n")
    if png_path is not None:
        unique = list(dict.fromkeys(kinds.tolist()))
        fig, axes = plt.subplots(1, max(len(unique), 1), figsize=(4.5 * max(len(unique), 1), 4))
        if len(unique) <= 1:
            axes = [axes]
        for ax, kind in zip(axes, unique or ["all"]):
            sel = kinds == kind if unique else np.ones(t.size, bool)
            ax.scatter(t[sel], e[sel], s=4, alpha=0.4, edgecolors="none")
            lims = [
                min(t[sel].min(), e[sel].min()) if sel.any() else 0.0,
                max(t[sel].max(), e[sel].max()) if sel.any() else 1.0,
            ]
            ax.plot(lims, lims, "k--", lw=0.8)
            if sel.any() and t[sel].min() > 0 and t[sel].max() / max(t[sel].min(), 1e-12) > 50:
                ax.set_xscale("log")
                ax.set_yscale("log")
            ax.set_xlabel(f"true {kind}")
            ax.set_ylabel(f"estimated {kind}")
        _finish_figure(fig, png_path)
    return csv_path
