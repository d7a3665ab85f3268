import numpy as np
import pytest

from rawcoex.coexpression import pairwise_coex
from rawcoex.downstream import (
    GDI_FLOOR,
    ConditionPartition,
    diff_expression,
    gdi_scores,
    gdi_threshold_test,
    gdi_transform,
    nearest_rank_percentile,
)
from rawcoex.estimation import estimate_average
from rawcoex.sqrtpoisson import chi2_isf
from rawcoex.zeromodel import RhoMatrix, chance_of_expression, fit_dispersion

from test_matrix import mat_from_dense


def const_rho(nonzero_frac, n_genes, n_cells):
    """RhoMatrix a constant-mu fit would produce: rho = nonzero fraction.

    With a flat expected-count row, matching expected to observed zeros
    forces a constant rho equal to the nonzero fraction, whatever the
    fitted dispersion value is.
    """
    rho = np.repeat(np.asarray(nonzero_frac, float)[:, None], n_cells, axis=1)
    return RhoMatrix(rho=rho, fitted=np.ones(n_genes, bool), mu_source="average")


class TestConditionPartition:
    def test_from_labels(self):
        p = ConditionPartition.from_labels(["b", "a", "b", "a"])
        assert p.k == 2
        assert p.sizes.tolist() == [2, 2]

    def test_single_condition_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            ConditionPartition.from_labels(["a", "a", "a"])

    def test_empty_condition_rejected(self):
        with pytest.raises(ValueError, match="at least one cell"):
            ConditionPartition(labels=np.array([0, 0]), names=("a", "b"))


class TestDiffExpression:
    def test_exact_match_gives_zero(self):
        m = mat_from_dense([[1, 0, 1, 0], [1, 1, 1, 1]])
        part = ConditionPartition.from_labels([0, 0, 1, 1])
        rho = const_rho([0.5, 0.9], 2, 4)
        res = diff_expression(m, rho, part, 0)
        assert res.w == 0.0
        assert res.dof == 1
        assert res.p_value == 1.0

    def test_condition_only_expression_is_significant(self):
        dense = np.zeros((1, 80), dtype=int)
        dense[0, :30] = 1  # expressed in 30 of the 40 condition-1 cells
        m = mat_from_dense(dense)
        part = ConditionPartition.from_labels([0] * 40 + [1] * 40)
        rho = const_rho([30 / 80], 1, 80)
        res = diff_expression(m, rho, part, 0)
        assert res.p_value < 1e-6

    def test_unfitted_gene_rejected(self):
        m = mat_from_dense([[1, 0], [0, 1]])
        part = ConditionPartition.from_labels([0, 1])
        rho = RhoMatrix(
            rho=np.full((2, 2), 0.5),
            fitted=np.array([True, False]),
            mu_source="average",
        )
        with pytest.raises(ValueError, match="no dispersion fit"):
            diff_expression(m, rho, part, 1)

    def test_null_p_values_uniform(self):
        # homogeneous genes, balanced random split, fitted (constant) rho:
        # decile masses of the p distribution stay within +-0.02 of 0.1.
        # Expression levels vary across genes so the discrete table
        # configurations do not pile up on a few p-value atoms.
        rng = np.random.default_rng(99)
        n_genes, m_cells = 6000, 400
        lam = np.exp(rng.uniform(np.log(0.5), np.log(4.0), size=(n_genes, 1)))
        p0 = np.exp(-lam)
        nonzero = rng.random((n_genes, m_cells)) > p0
        labels = np.array([0, 1] * (m_cells // 2))
        part = ConditionPartition.from_labels(labels)
        dense = nonzero.astype(int)
        ok = (dense.sum(axis=1) > 0) & (dense.sum(axis=1) < m_cells)
        dense = dense[ok]
        m = mat_from_dense(dense)
        rho = const_rho(dense.mean(axis=1), dense.shape[0], m_cells)
        pvals = np.array(
            [diff_expression(m, rho, part, g).p_value for g in range(m.n_genes)]
        )
        deciles = np.histogram(pvals, bins=np.linspace(0, 1, 11))[0] / pvals.size
        assert np.max(np.abs(deciles - 0.1)) < 0.02


class TestGdiTransform:
    def test_reference_scale_point(self):
        assert gdi_transform(15.137) == pytest.approx(2.2203, abs=1e-3)

    def test_zero_score_floored(self):
        assert gdi_transform(0.0) == GDI_FLOOR

    def test_far_tail_finite_and_increasing(self):
        s = np.array([1.0, 10.0, 100.0, 1e4, 1e6])
        g = gdi_transform(s)
        assert np.all(np.isfinite(g))
        assert np.all(np.diff(g) > 0)

    def test_monotone_argsort_matches(self):
        rng = np.random.default_rng(1)
        s = rng.uniform(0.01, 60.0, size=500)
        g = gdi_transform(s)
        assert np.array_equal(np.argsort(s, kind="stable"), np.argsort(g, kind="stable"))


def synthetic_stream(n_genes, rng):
    """Tuples for every unordered pair with random indices; returns the
    stream and the per-gene collections for the full-sort oracle."""
    per_gene = [[] for _ in range(n_genes)]
    stream = []
    for g1 in range(n_genes):
        for g2 in range(g1 + 1, n_genes):
            r = rng.normal()
            stream.append((g1, g2, r))
            per_gene[g1].append(r**2)
            per_gene[g2].append(r**2)
    return stream, per_gene


class TestGdiScores:
    def test_eleven_genes_alpha_tenth(self):
        rng = np.random.default_rng(17)
        stream, per_gene = synthetic_stream(11, rng)
        scores = gdi_scores(stream, 11, alpha=0.1)
        for g in range(11):
            assert scores.s[g] == nearest_rank_percentile(per_gene[g], 0.1)
            # nearest-rank 90th percentile of 10 values = 9th smallest
            assert scores.s[g] == np.sort(per_gene[g])[8]

    @pytest.mark.parametrize("n_genes,alpha", [(5, 0.5), (23, 0.1), (60, 1e-3), (11, 0.25)])
    def test_buffer_matches_full_sort(self, n_genes, alpha):
        rng = np.random.default_rng(n_genes)
        stream, per_gene = synthetic_stream(n_genes, rng)
        scores = gdi_scores(stream, n_genes, alpha=alpha)
        for g in range(n_genes):
            assert scores.s[g] == nearest_rank_percentile(per_gene[g], alpha)

    def test_full_sort_oracle_at_500_genes(self):
        rng = np.random.default_rng(500)
        n = 500
        g1, g2 = np.triu_indices(n, k=1)
        r = rng.normal(size=g1.size)
        from rawcoex.coexpression import PairBlock

        block = PairBlock(
            g1=g1.astype(np.int32), g2=g2.astype(np.int32),
            o11=None, o10=None, o01=None, o00=None,
            e11=None, e10=None, e01=None, e00=None,
            w=None, r=r, p=None,
        )
        scores = gdi_scores(iter([block]), n, alpha=1e-3)
        r2 = r**2
        for g in (0, 13, 250, 499):
            vals = np.concatenate([r2[g2 == g], r2[g1 == g]])
            assert scores.s[g] == nearest_rank_percentile(vals, 1e-3)

    def test_all_zero_indices(self):
        stream = [(g1, g2, 0.0) for g1 in range(4) for g2 in range(g1 + 1, 4)]
        scores = gdi_scores(stream, 4, alpha=1e-3)
        assert np.all(scores.s == 0.0)
        assert np.all(scores.gdi == GDI_FLOOR)

    def test_incomplete_stream_rejected(self):
        stream = [(0, 1, 0.5)]
        with pytest.raises(ValueError, match="pair stream"):
            gdi_scores(stream, 4)

    def test_accepts_engine_blocks(self):
        rng = np.random.default_rng(5)
        lam = rng.uniform(0.3, 2.0, size=(30, 1))
        dense = rng.poisson(lam, size=(30, 120))
        dense[dense.sum(axis=1) == 0, 0] = 1
        m = mat_from_dense(dense)
        params = estimate_average(m)
        rho = chance_of_expression(params, fit_dispersion(m, params))
        blocks = list(pairwise_coex(m, rho, tile=8))
        scores = gdi_scores(iter(blocks), m.n_genes, alpha=0.05)
        # oracle: gather every pair value, full sort per gene
        per_gene = [[] for _ in range(m.n_genes)]
        for b in blocks:
            for i in range(b.n_pairs):
                per_gene[int(b.g1[i])].append(float(b.r[i]) ** 2)
                per_gene[int(b.g2[i])].append(float(b.r[i]) ** 2)
        for g in range(m.n_genes):
            assert scores.s[g] == nearest_rank_percentile(per_gene[g], 0.05)


class TestGdiThreshold:
    def test_reference_threshold(self):
        scores_hi = gdi_scores([(0, 1, np.sqrt(15.2))], 2, alpha=1e-3)
        assert gdi_threshold_test(scores_hi).tolist() == [True, True]

    def test_zero_never_flagged(self):
        scores = gdi_scores([(0, 1, 0.0)], 2, alpha=1e-3)
        assert gdi_threshold_test(scores).tolist() == [False, False]

    def test_threshold_value(self):
        assert chi2_isf(1e-4, 1) == pytest.approx(15.137, abs=1e-3)
