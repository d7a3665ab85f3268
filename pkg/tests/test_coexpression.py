import numpy as np
import pytest

from rawcoex.coexpression import (
    CoexTable,
    classical_expected,
    coex_stats,
    expected_table,
    make_table,
    observed_table,
    pair_count,
    pairwise_coex,
    pairwise_subset,
)
from rawcoex.estimation import estimate_average
from rawcoex.zeromodel import RhoMatrix, chance_of_expression, fit_dispersion

from test_matrix import mat_from_dense

# Reference 2x2 tables for a pair of ubiquitously expressed genes
# (m = 1379 cells): observed counts and model-based expected counts.
FIX_OBSERVED = (705, 4, 654, 16)
FIX_EXPECTED = (703.6, 5.4, 655.4, 14.6)
FIX_M = 1379


def rho_of(values, fitted=None):
    rho = np.asarray(values, dtype=np.float64)
    if fitted is None:
        fitted = np.ones(rho.shape[0], dtype=bool)
    return RhoMatrix(rho=rho, fitted=fitted, mu_source="average")


def fixture_matrix():
    """Two genes over 1379 cells realizing the reference observed table."""
    dense = np.zeros((2, FIX_M), dtype=np.int64)
    dense[0, :705] = 1          # both expressed
    dense[1, :705] = 2
    dense[0, 705:709] = 3       # only first
    dense[1, 709:1363] = 1      # only second
    return mat_from_dense(dense)


class TestObservedTable:
    def test_hand_count(self):
        m = mat_from_dense([[1, 0, 1], [0, 0, 1]])
        assert observed_table(m, 0, 1) == (1, 1, 0, 1)

    def test_all_zero_partner(self):
        m = mat_from_dense([[1, 0, 1], [0, 0, 0]])
        o11, o10, o01, o00 = observed_table(m, 0, 1)
        assert o11 == 0 and o01 == 0

    def test_reference_fixture(self):
        m = fixture_matrix()
        o = observed_table(m, 0, 1)
        assert o == FIX_OBSERVED
        assert o[0] + o[1] == 709 and o[2] + o[3] == 670
        assert o[0] + o[2] == 1359 and o[1] + o[3] == 20
        assert sum(o) == FIX_M

    def test_self_pair_rejected(self):
        m = mat_from_dense([[1, 0], [0, 1]])
        with pytest.raises(ValueError, match="itself"):
            observed_table(m, 1, 1)


class TestExpectedTable:
    def test_half_half(self):
        rho = rho_of([[0.5, 0.5], [0.5, 0.5]])
        assert expected_table(rho, 0, 1) == (0.5, 0.5, 0.5, 0.5)

    def test_zero_partner(self):
        rho = rho_of([[0.3, 0.9], [0.0, 0.0]])
        e11, e10, e01, e00 = expected_table(rho, 0, 1)
        assert e11 == 0.0 and e01 == 0.0
        assert e10 == pytest.approx(1.2)

    def test_sums_to_cell_count(self):
        rng = np.random.default_rng(8)
        rho = rho_of(rng.uniform(0, 1, size=(4, 57)))
        e = expected_table(rho, 1, 3)
        assert sum(e) == pytest.approx(57.0, abs=1e-9)


class TestClassicalExpected:
    def test_reference_fixture(self):
        e = classical_expected((709, 670), (1359, 20), FIX_M)
        for got, want in zip(e, (698.7, 10.3, 660.3, 9.7)):
            assert got == pytest.approx(want, abs=0.05)

    def test_uniform_marginals(self):
        e = classical_expected((50, 50), (50, 50), 100)
        assert e == (25.0, 25.0, 25.0, 25.0)

    def test_degenerate_marginal(self):
        e = classical_expected((100, 0), (60, 40), 100)
        assert e[2] == 0.0 and e[3] == 0.0

    def test_inconsistent_marginals_rejected(self):
        with pytest.raises(ValueError, match="marginals"):
            classical_expected((60, 50), (50, 50), 100)


class TestCoexStats:
    def test_no_deviation(self):
        t = CoexTable(10, 20, 30, 40, 10.0, 20.0, 30.0, 40.0, 100)
        res = coex_stats(t)
        assert res.w == 0.0 and res.r == 0.0 and res.p_value == 1.0

    def test_reference_fixture_statistics(self):
        t = CoexTable(*FIX_OBSERVED, *FIX_EXPECTED, FIX_M)
        res = coex_stats(t)
        assert res.w == pytest.approx(0.503, abs=0.005)
        assert res.r == pytest.approx(0.709, abs=0.005)
        assert res.r > 0
        assert res.r**2 == pytest.approx(res.w, abs=1e-9)

    def test_small_expected_cells_clamped(self):
        t = CoexTable(3, 0, 0, 97, 0.5, 0.2, 0.2, 99.1, 100)
        res = coex_stats(t)
        assert np.isfinite(res.w)
        # denominators clamp at 1: contribution of the first cell is (3-0.5)^2
        assert res.w == pytest.approx(
            2.5**2 + 0.2**2 + 0.2**2 + (97 - 99.1) ** 2 / 99.1, abs=1e-12
        )

    def test_sign_tracks_joint_excess(self):
        base = dict(e11=40.0, e10=10.0, e01=10.0, e00=40.0, m=100)
        plus = coex_stats(CoexTable(o11=45, o10=5, o01=5, o00=45, **base))
        minus = coex_stats(CoexTable(o11=35, o10=15, o01=15, o00=35, **base))
        assert plus.r > 0 > minus.r


@pytest.fixture(scope="module")
def fitted_random():
    rng = np.random.default_rng(2024)
    lam = rng.uniform(0.2, 3.0, size=(50, 1))
    dense = rng.poisson(lam * rng.uniform(0.5, 1.5, size=(1, 100)))
    while (dense.sum(axis=1) == 0).any():
        dense[dense.sum(axis=1) == 0, 0] = 1
    m = mat_from_dense(dense)
    params = estimate_average(m)
    fit = fit_dispersion(m, params)
    rho = chance_of_expression(params, fit)
    return m, rho


class TestPairwiseEngine:
    def test_three_genes_three_pairs(self, fitted_random):
        m, rho = fitted_random
        sub = mat_from_dense(m.to_dense()[:3])
        rho3 = RhoMatrix(rho=rho.rho[:3], fitted=rho.fitted[:3], mu_source=rho.mu_source)
        blocks = list(pairwise_coex(sub, rho3))
        total = sum(b.n_pairs for b in blocks)
        assert total == 3 == pair_count(3)

    def test_bit_identical_to_naive(self, fitted_random):
        m, rho = fitted_random
        got = {}
        for b in pairwise_coex(m, rho, tile=16):
            for i in range(b.n_pairs):
                got[(int(b.g1[i]), int(b.g2[i]))] = (
                    int(b.o11[i]), int(b.o10[i]), int(b.o01[i]), int(b.o00[i]),
                    float(b.e11[i]), float(b.e10[i]), float(b.e01[i]), float(b.e00[i]),
                    float(b.w[i]), float(b.r[i]), float(b.p[i]),
                )
        count = 0
        for g1 in range(m.n_genes):
            for g2 in range(g1 + 1, m.n_genes):
                t = make_table(m, rho, g1, g2)
                res = coex_stats(t)
                want = (*t.observed(), *t.expected(), res.w, res.r, res.p_value)
                assert got[(g1, g2)] == want  # exact, not approx
                count += 1
        assert count == len(got) == pair_count(m.n_genes)

    def test_tile_size_invariance(self, fitted_random):
        m, rho = fitted_random
        def collect(tile):
            out = {}
            for b in pairwise_coex(m, rho, tile=tile):
                for i in range(b.n_pairs):
                    out[(int(b.g1[i]), int(b.g2[i]))] = float(b.w[i])
            return out
        assert collect(7) == collect(64)

    def test_thread_invariance(self, fitted_random):
        m, rho = fitted_random
        def collect(threads):
            out = {}
            for b in pairwise_coex(m, rho, tile=16, threads=threads):
                for i in range(b.n_pairs):
                    out[(int(b.g1[i]), int(b.g2[i]))] = (float(b.w[i]), float(b.r[i]))
            return out
        assert collect(1) == collect(3)

    def test_marginal_agreement_and_r2_identity(self, fitted_random):
        m, rho = fitted_random
        tol = 2 * 1e-8 * m.n_cells
        for b in pairwise_coex(m, rho):
            obs_row1 = b.o11 + b.o10
            exp_row1 = b.e11 + b.e10
            assert np.max(np.abs(obs_row1 - exp_row1)) <= tol
            assert np.max(np.abs(b.r**2 - b.w)) <= 1e-9

    def test_sign_semantics_bulk(self, fitted_random):
        m, rho = fitted_random
        for b in pairwise_coex(m, rho):
            nonzero = np.abs(b.o11 - b.e11) > 1e-9
            agree = np.sign(b.o11 - b.e11)[nonzero] == np.sign(b.r)[nonzero]
            assert np.all(agree)

    def test_subset_path(self, fitted_random):
        m, rho = fitted_random
        pairs = [(0, 5), (3, 17)]
        out = list(pairwise_subset(m, rho, pairs))
        assert [(a, b) for a, b, _, _ in out] == pairs
        table = make_table(m, rho, 0, 5)
        assert out[0][2] == table

    def test_misaligned_inputs_rejected(self, fitted_random):
        m, rho = fitted_random
        bad = RhoMatrix(rho=rho.rho[:, :-1], fitted=rho.fitted, mu_source=rho.mu_source)
        with pytest.raises(ValueError, match="misaligned"):
            list(pairwise_coex(m, bad))
