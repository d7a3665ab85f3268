"""Acceptance checks: one callable per criterion, shared heavy artifacts.

Used by the ``validate`` subcommand and by the acceptance test module.
Each check returns a CheckResult with a pass flag and a one-line detail;
the expensive single-population benchmark (criteria 4-6 share it) is
built once.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .coexpression import (
    CoexTable,
    classical_expected,
    coex_stats,
    make_table,
    pairwise_coex,
)
from .downstream import gdi_scores, gdi_threshold_test, gdi_transform
from .estimation import estimate_average, estimate_sqrt
from .matrix import from_coo, marginals
from .sqrtpoisson import SQRT_VAR_MAX, chi2_isf, sqrt_mean, sqrt_mean_inv, sqrt_var
from .synthetic import ClusterSpec, SynthConfig, default_null_config, generate
from .zeromodel import chance_of_expression, fit_dispersion, solve_dispersion

__all__ = ["CheckResult", "NullAnalysis", "run_all", "CRITERIA"]

NULL_SEED = 20240808
ACCURACY_SEED = 77


@dataclass(frozen=True)
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] criterion {self.criterion}: {self.name} ({self.detail}; {self.seconds:.1f}s)"


@dataclass
class NullAnalysis:
    """Single-population benchmark pipeline, shared by criteria 4-6."""

    n_genes: int
    n_cells: int
    matrix: object
    truth: object
    fit: object
    rho: object
    pvalues: np.ndarray
    scores: object
    build_seconds: float

    @classmethod
    def build(cls, n_genes: int = 2000, n_cells: int = 800, seed: int = NULL_SEED):
        t0 = time.perf_counter()
        mat, truth = generate(default_null_config(n_genes, n_cells, seed=seed))
        params = estimate_average(mat)
        fit = fit_dispersion(mat, params)
        rho = chance_of_expression(params, fit)
        pvals = []
        blocks = []
        for b in pairwise_coex(mat, rho, tile=256):
            pvals.append(b.p)
            blocks.append(b)
        scores = gdi_scores(iter(blocks), mat.n_genes, alpha=1e-3)
        return cls(
            n_genes=mat.n_genes,
            n_cells=mat.n_cells,
            matrix=mat,
            truth=truth,
            fit=fit,
            rho=rho,
            pvalues=np.concatenate(pvals),
            scores=scores,
            build_seconds=time.perf_counter() - t0,
        )


def _timed(fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return passed, detail, time.perf_counter() - t0


def criterion_1() -> CheckResult:
    """Special-function certificates."""

    def check():
        xs = np.linspace(0.5, 2.5, 801)
        peak = float(np.max(sqrt_var(xs)))
        ok_peak = abs(peak - 0.4125) <= 5e-4

        grid = np.linspace(0.0, 200.0, 401)
        resid = sqrt_mean(grid) ** 2 + sqrt_var(grid) - grid
        ok_ident = float(np.max(np.abs(resid))) <= 1e-9

        ys = np.linspace(0.0, 40.0, 161)
        gap = sqrt_mean_inv(ys) - ys**2
        ok_gap = bool(np.all(gap >= -1e-12) and np.all(gap <= 0.4125 + 1e-6))

        h = 1e-2
        xs3 = np.linspace(3 * h, 10.0, 200)
        d3 = (
            sqrt_mean_inv(xs3 + 2 * h)
            - 2 * sqrt_mean_inv(xs3 + h)
            + 2 * sqrt_mean_inv(xs3 - h)
            - sqrt_mean_inv(xs3 - 2 * h)
        ) / (2 * h**3)
        d3max = float(np.max(np.abs(d3)))
        ok_d3 = d3max <= 1.21

        passed = ok_peak and ok_ident and ok_gap and ok_d3
        detail = (
            f"max var {peak:.5f}, identity residual {np.max(np.abs(resid)):.1e}, "
            f"|d3| max {d3max:.4f}"
        )
        return passed, detail

    passed, detail, secs = _timed(check)
    return CheckResult(1, "special-function certificates", passed and secs < 5.0, detail, secs)


def criterion_2() -> CheckResult:
    """Reference-table statistics."""

    def check():
        e = classical_expected((709, 670), (1359, 20), 1379)
        ok_classical = all(
            abs(g - w) <= 0.05 for g, w in zip(e, (698.7, 10.3, 660.3, 9.7))
        )
        res = coex_stats(
            CoexTable(705, 4, 654, 16, 703.6, 5.4, 655.4, 14.6, 1379)
        )
        ok_stats = abs(res.w - 0.503) <= 0.005 and abs(res.r - 0.709) <= 0.005
        return ok_classical and ok_stats, f"W={res.w:.4f}, R={res.r:.4f}"

    passed, detail, secs = _timed(check)
    return CheckResult(2, "reference-table statistics", passed and secs < 1.0, detail, secs)


def criterion_3() -> CheckResult:
    """Differentiation-scale constants."""

    def check():
        q = float(chi2_isf(1e-4, 1))
        g = gdi_transform(15.137)
        ok = abs(q - 15.137) <= 1e-3 and abs(g - 2.2203) <= 1e-3
        return ok, f"quantile={q:.4f}, gdi={g:.5f}"

    passed, detail, secs = _timed(check)
    return CheckResult(3, "differentiation-scale constants", passed and secs < 1.0, detail, secs)


def _ecdf_band(pvalues: np.ndarray, lo: float) -> float:
    ps = np.sort(pvalues)
    n = ps.size
    i = np.arange(1, n + 1)
    dev = np.maximum(np.abs(i / n - ps), np.abs((i - 1) / n - ps))
    start = np.searchsorted(ps, lo)
    band = float(dev[start:].max()) if start < n else 0.0
    return max(band, abs(start / n - lo))


def criterion_4(shared: NullAnalysis) -> CheckResult:
    """Null calibration of the pairwise test."""

    def check():
        band = _ecdf_band(shared.pvalues, 0.005)
        return band <= 0.01, f"{shared.pvalues.size} pairs, ECDF dev {band:.4f}"

    passed, detail, secs = _timed(check)
    total = secs + shared.build_seconds
    return CheckResult(4, "null p-value calibration", passed and total < 120.0, detail, total)


def criterion_5(shared: NullAnalysis) -> CheckResult:
    """Differentiation-score false-positive envelope."""

    def check():
        frac = float(gdi_threshold_test(shared.scores, 1e-4).mean())
        return 0.01 <= frac <= 0.08, f"flagged {frac:.3%}"

    passed, detail, secs = _timed(check)
    return CheckResult(5, "differentiation false-positive envelope", passed, detail, secs)


def criterion_6(shared: NullAnalysis) -> CheckResult:
    """Dispersion-fit exactness and negative-dispersion envelope."""

    def check():
        a1 = solve_dispersion(np.ones(10), 5)
        a2 = solve_dispersion(np.ones(10), 2)
        ok_analytic = abs(a1 - 1.0) <= 1e-6 and abs(a2 - (1 - math.log(5))) <= 1e-6

        zeros = marginals(shared.matrix).gene.zero_cells
        resid = np.abs(
            (1.0 - shared.rho.rho).sum(axis=1) - zeros
        )[shared.fit.fitted]
        ok_resid = float(resid.max()) <= 1e-6 * shared.n_cells

        frac = shared.fit.negative.sum() / shared.fit.fitted.sum()
        ok_frac = 0.01 <= frac <= 0.40
        return (
            ok_analytic and ok_resid and ok_frac,
            f"a={a1:.6f}/{a2:.6f}, max residual {resid.max():.2e}, negative {frac:.1%}",
        )

    passed, detail, secs = _timed(check)
    return CheckResult(6, "dispersion-fit exactness", passed and secs < 10.0, detail, secs)


def criterion_7() -> CheckResult:
    """Estimator accuracy and convergence with the cell count."""

    def check():
        rmse = {}
        cv_sqrt_4000 = None
        for m_cells in (800, 4000):
            mat, truth = generate(
                default_null_config(2000, m_cells, seed=ACCURACY_SEED)
            )
            lam_true = truth.lam[0]
            sel = lam_true >= 0.25
            for name, est in (("average", estimate_average), ("sqrt", estimate_sqrt)):
                p = est(mat)
                rel = (p.lam[sel] - lam_true[sel]) / lam_true[sel]
                rmse[(name, m_cells)] = float(np.sqrt(np.mean(rel**2)))
                if name == "sqrt" and m_cells == 4000:
                    nu_rel = (p.nu - truth.nu) / truth.nu
                    cv_sqrt_4000 = float(np.sqrt(np.mean(nu_rel**2)))
        ok_cv = cv_sqrt_4000 <= 0.08
        ok_trend = (
            rmse[("average", 4000)] < rmse[("average", 800)]
            and rmse[("sqrt", 4000)] < rmse[("sqrt", 800)]
        )
        detail = (
            f"nu CV {cv_sqrt_4000:.4f}; lam RMSE avg {rmse[('average', 800)]:.3f}"
            f"->{rmse[('average', 4000)]:.3f}, sqrt {rmse[('sqrt', 800)]:.3f}"
            f"->{rmse[('sqrt', 4000)]:.3f}"
        )
        return ok_cv and ok_trend, detail

    passed, detail, secs = _timed(check)
    return CheckResult(7, "estimator accuracy", passed and secs < 60.0, detail, secs)


def criterion_8() -> CheckResult:
    """Tiled engine bit-identical to the pair-at-a-time path."""

    def check():
        rng = np.random.default_rng(8)
        for trial in range(20):
            lam = np.exp(rng.uniform(np.log(0.2), np.log(4.0), size=(100, 1)))
            nu = rng.lognormal(0, 0.3, size=(1, 200))
            dense = rng.poisson(lam * nu)
            dense[dense.sum(axis=1) == 0, 0] = 1
            rows, cols = np.nonzero(dense)
            mat = from_coo(
                [f"g{i}" for i in range(100)],
                [f"c{j}" for j in range(200)],
                rows,
                cols,
                dense[rows, cols],
            )
            params = estimate_average(mat)
            rho = chance_of_expression(params, fit_dispersion(mat, params))
            engine = {}
            for b in pairwise_coex(mat, rho, tile=64):
                for i in range(b.n_pairs):
                    engine[(int(b.g1[i]), int(b.g2[i]))] = (
                        int(b.o11[i]), int(b.o10[i]), int(b.o01[i]), int(b.o00[i]),
                        float(b.e11[i]), float(b.e10[i]), float(b.e01[i]), float(b.e00[i]),
                        float(b.w[i]), float(b.r[i]), float(b.p[i]),
                    )
            for g1 in range(mat.n_genes):
                for g2 in range(g1 + 1, mat.n_genes):
                    t = make_table(mat, rho, g1, g2)
                    res = coex_stats(t)
                    if engine[(g1, g2)] != (
                        *t.observed(), *t.expected(), res.w, res.r, res.p_value
                    ):
                        return False, f"mismatch at trial {trial} pair ({g1},{g2})"
        return True, "20 matrices, all pairs bit-identical"

    passed, detail, secs = _timed(check)
    return CheckResult(8, "engine equivalence", passed and secs < 30.0, detail, secs)


def criterion_9() -> CheckResult:
    """Count variance follows mean + dispersion * mean^2."""

    def check():
        lams = [0.5, 2.0, 8.0]
        disps = [0.0, 0.25, 1.0]
        lam = np.array([l for l in lams for _ in disps])
        disp = np.array([d for _ in lams for d in disps])
        n_draws = 100_000
        cfg = SynthConfig(
            clusters=(ClusterSpec(n_cells=n_draws, lam=lam, disp=disp),),
            seed=9,
            nu_values=np.ones(n_draws),
        )
        mat, _ = generate(cfg)
        dense_rows = np.zeros((lam.size, n_draws))
        for g in range(lam.size):
            cols, vals = mat.row(g)
            dense_rows[g, cols] = vals
        worst = 0.0
        for g in range(lam.size):
            mu, a = lam[g], disp[g]
            want = mu + a * mu * mu
            if a > 0:
                nb_n = 1.0 / a
                nb_p = nb_n / (nb_n + mu)
                kurt = float(sps.nbinom.stats(nb_n, nb_p, moments="k"))
            else:
                kurt = float(sps.poisson.stats(mu, moments="k"))
            mu4 = (kurt + 3.0) * want**2
            sigma = math.sqrt((mu4 - want**2) / n_draws)
            s2 = float(dense_rows[g].var(ddof=1))
            worst = max(worst, abs(s2 - want) / sigma)
            if abs(s2 - want) > 3.0 * sigma:
                return False, f"lam={mu}, a={a}: s2={s2:.3f} vs {want:.3f}"
        return True, f"9 settings within 3 sigma (worst {worst:.2f} sigma)"

    passed, detail, secs = _timed(check)
    return CheckResult(9, "variance law", passed and secs < 30.0, detail, secs)


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
}


def run_all(quick: bool = False, shared: NullAnalysis | None = None):
    """Run the acceptance suite; ``quick`` limits it to the fast checks."""
    results = [criterion_1(), criterion_2(), criterion_3()]
    if quick:
        return results
    if shared is None:
        shared = NullAnalysis.build()
    results.append(criterion_4(shared))
    results.append(criterion_5(shared))
    results.append(criterion_6(shared))
    results.append(criterion_7())
    results.append(criterion_8())
    results.append(criterion_9())
    return results
