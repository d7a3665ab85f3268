import numpy as np
import pytest
from scipy import stats as sps

from rawcoex.estimation import estimate_average
from rawcoex.matrix import marginals
from rawcoex.synthetic import (
    ClusterSpec,
    SynthConfig,
    _CELL_STREAM_BASE,
    _stream,
    default_cluster_config,
    default_null_config,
    fit_cluster_params,
    generate,
    zero_prob,
    zero_rate_check,
)
from rawcoex.zeromodel import fit_dispersion


def one_cluster(lam, disp, n_cells, seed=0, nu=None):
    return SynthConfig(
        clusters=(
            ClusterSpec(
                n_cells=n_cells,
                lam=np.asarray(lam, float),
                disp=np.asarray(disp, float),
            ),
        ),
        seed=seed,
        nu_values=None if nu is None else np.asarray(nu, float),
    )


def nb_var_oracle(mu, a):
    """Exact count variance via scipy's negative binomial (Poisson at a=0)."""
    if a == 0.0:
        return mu
    n = 1.0 / a
    p = n / (n + mu)
    return float(sps.nbinom.stats(n, p, moments="v"))


class TestGenerate:
    def test_poisson_mean_large_sample(self):
        cfg = one_cluster([2.0], [0.0], 100_000, seed=11, nu=np.ones(100_000))
        mat, _ = generate(cfg)
        mean = marginals(mat).gene.row_sum[0] / mat.n_cells
        assert mean == pytest.approx(2.0, abs=0.02)

    def test_zero_mean_gene_all_zero(self):
        cfg = one_cluster([0.0, 1.0], [0.3, 0.3], 500, seed=2)
        mat, _ = generate(cfg)
        assert marginals(mat).gene.row_sum[0] == 0

    def test_variance_law(self):
        # sample variance matches mu + a*mu^2 within 3 sigma of the
        # sampling noise of a variance estimate (scipy moment oracle)
        cfg = one_cluster([4.0], [0.5], 200_000, seed=5, nu=np.ones(200_000))
        mat, _ = generate(cfg)
        counts = np.zeros(mat.n_cells)
        cols, vals = mat.row(0)
        counts[cols] = vals
        s2 = counts.var(ddof=1)
        want = nb_var_oracle(4.0, 0.5)
        assert want == pytest.approx(12.0, abs=1e-9)
        n = 1.0 / 0.5
        p = n / (n + 4.0)
        mu4 = float(sps.nbinom.stats(n, p, moments="k") + 3.0) * want**2
        sigma = np.sqrt((mu4 - want**2) / mat.n_cells)
        assert abs(s2 - want) <= 3.0 * sigma
        assert abs(s2 - 12.0) / 12.0 <= 0.03

    def test_reproducible_from_seed(self):
        cfg = default_null_config(80, 60, seed=42)
        m1, t1 = generate(cfg)
        m2, t2 = generate(cfg)
        assert np.array_equal(m1.to_dense(), m2.to_dense())
        assert np.array_equal(t1.nu, t2.nu)

    def test_different_seeds_differ(self):
        a, _ = generate(default_null_config(40, 30, seed=1))
        b, _ = generate(default_null_config(40, 30, seed=2))
        assert not np.array_equal(a.to_dense(), b.to_dense())

    def test_cell_streams_are_keyed_not_sequential(self):
        # regenerating a single cell from its own stream reproduces its
        # column: the draw protocol is (gammas for disp>0 genes, poissons)
        cfg = one_cluster([2.0, 1.0, 0.5], [0.0, 0.4, 0.8], 50, seed=9)
        mat, truth = generate(cfg)
        dense = mat.to_dense()
        spec = cfg.clusters[0]
        for c in (0, 17, 49):
            rng = _stream(cfg.seed, _CELL_STREAM_BASE + c)
            level = spec.lam.copy()
            mixed = np.flatnonzero(spec.disp > 0)
            level[mixed] = rng.gamma(
                1.0 / spec.disp[mixed], spec.disp[mixed] * spec.lam[mixed]
            )
            counts = rng.poisson(truth.nu[c] * level)
            assert np.array_equal(counts, dense[:, c])

    def test_nu_rescaled_to_unit_mean(self):
        cfg = default_null_config(30, 400, seed=3)
        _, truth = generate(cfg)
        assert truth.nu.mean() == pytest.approx(1.0, abs=1e-12)
        cfg2 = one_cluster([1.0], [0.0], 4, nu=[1.0, 2.0, 3.0, 10.0])
        _, t2 = generate(cfg2)
        assert t2.nu.mean() == pytest.approx(1.0, abs=1e-15)
        assert t2.nu[3] / t2.nu[0] == pytest.approx(10.0)

    def test_cluster_layout(self):
        cfg = default_cluster_config(50, 43, n_clusters=4, seed=7)
        mat, truth = generate(cfg)
        sizes = np.bincount(truth.cluster_of)
        assert sizes.sum() == 43 and sizes.size == 4
        assert mat.n_cells == 43


class TestZeroProb:
    def test_gamma_mixture_value(self):
        assert zero_prob(1.0, 1.0) == pytest.approx(0.5)

    def test_poisson_limit(self):
        assert zero_prob(2.0, 0.0) == pytest.approx(np.exp(-2.0))

    def test_closed_form_point(self):
        assert zero_prob(3.0, 0.5) == pytest.approx(0.16, abs=1e-12)

    def test_matches_scipy_pmf(self):
        for mu, a in [(0.5, 0.25), (2.0, 1.0), (8.0, 0.1)]:
            n = 1.0 / a
            p = n / (n + mu)
            assert zero_prob(mu, a) == pytest.approx(
                float(sps.nbinom.pmf(0, n, p)), abs=1e-12
            )


class TestZeroRateCheck:
    def test_expected_matches_observed_in_aggregate(self):
        cfg = default_null_config(300, 600, seed=21)
        mat, truth = generate(cfg)
        expected, observed = zero_rate_check(truth, mat)
        # binomial noise per gene: 3 sigma band almost everywhere
        sigma = np.sqrt(expected * (1 - expected) / mat.n_cells)
        frac_in = np.mean(np.abs(observed - expected) <= 3 * sigma + 1e-9)
        assert frac_in > 0.98


class TestFitClusterParams:
    def test_single_cluster_is_global_estimate(self):
        mat, _ = generate(default_null_config(60, 120, seed=13))
        params = estimate_average(mat)
        cfg, floored = fit_cluster_params(
            mat,
            np.zeros(mat.n_cells, dtype=int),
            estimate_average,
            fit_dispersion,
        )
        assert np.allclose(cfg.clusters[0].lam, params.lam)
        assert cfg.clusters[0].n_cells == mat.n_cells
        assert np.all(cfg.clusters[0].disp >= 0)
        assert floored.shape == (1, 60)

    def test_closed_loop_recovery(self):
        # refit of generated data recovers expression within 10% RMSE
        cfg = default_null_config(400, 4000, seed=33)
        mat, truth = generate(cfg)
        refit, _ = fit_cluster_params(
            mat,
            np.zeros(mat.n_cells, dtype=int),
            estimate_average,
            fit_dispersion,
        )
        lam_true = truth.lam[0]
        lam_fit = refit.clusters[0].lam
        sel = lam_true >= 0.25
        rel = (lam_fit[sel] - lam_true[sel]) / lam_true[sel]
        assert np.sqrt(np.mean(rel**2)) < 0.10

    def test_empty_cluster_rejected(self):
        mat, _ = generate(default_null_config(10, 20, seed=1))
        with pytest.raises(ValueError, match="labels"):
            fit_cluster_params(
                mat, np.zeros(5, dtype=int), estimate_average, fit_dispersion
            )
