import numpy as np
import pytest

from lotattn import ot
from lotattn.coupling import (
    LowRankCoupling,
    PivotMeasure,
    apply_to_values,
    cluster_decomposition_residual,
    glue,
    lot_attention,
    lot_vs_ot_gap,
    materialize_dense,
    numerical_rank,
    soft_clusters,
    solve_coupling,
)
from lotattn.validation import InvalidInputError, ShapeMismatchError, UnsupportedSizeError


def random_tokens(rng, n, d):
    return rng.normal(size=(n, d)) / np.sqrt(d)


def dense_triple_product(gamma1, gamma2, sigma):
    """Independent oracle: explicit (G1)^T Diag(1/sigma) G2 via einsum."""
    return np.einsum("ti,t,tj->ij", gamma1, 1.0 / sigma, gamma2)


def solved_coupling(seed, n, r, d=4, eps=1.0, iters=50, tol=1e-11):
    rng = np.random.default_rng(seed)
    Q = random_tokens(rng, n, d)
    K = random_tokens(rng, n, d)
    pivot = PivotMeasure.random(r, d, rng)
    coupling, _, _ = solve_coupling(Q, K, pivot, eps, iters, tol)
    return coupling, Q, K, pivot


class TestGlue:
    def test_diagonal_gamma1_cancels(self):
        # each pivot glued to its own query: Diag(sigma) Diag(sigma)^-1 = I
        sigma = np.array([0.2, 0.3, 0.5])
        gamma2 = np.array([[0.1, 0.05, 0.05], [0.1, 0.1, 0.1], [0.2, 0.15, 0.15]])
        coupling = glue(np.diag(sigma), gamma2, sigma)
        assert np.allclose(materialize_dense(coupling), gamma2, atol=1e-15)

    def test_single_pivot_independent_coupling(self):
        p1 = np.array([0.25, 0.75])
        p2 = np.array([0.6, 0.4])
        coupling = glue(p1[None, :], p2[None, :], np.array([1.0]))
        assert np.allclose(materialize_dense(coupling), np.outer(p1, p2), atol=1e-15)

    def test_random_factors_match_einsum_oracle(self):
        coupling, *_ = solved_coupling(seed=0, n=3, r=2)
        expected = dense_triple_product(coupling.gamma1, coupling.gamma2, coupling.sigma)
        assert np.abs(materialize_dense(coupling) - expected).max() < 1e-15

    def test_propagates_residual_bound(self):
        rng = np.random.default_rng(1)
        n, r = 12, 3
        pivot = PivotMeasure.random(r, 4, rng)
        coupling, plan_q, plan_k = solve_coupling(
            random_tokens(rng, n, 4), random_tokens(rng, n, 4), pivot, 1.0, 3, tolerance=1e-15
        )
        assert coupling.col_residual_bound == plan_q.row_residual + plan_k.col_residual

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(InvalidInputError):
            glue(np.full((1, 2), 0.5), np.full((1, 2), 0.5), np.array([0.0, 1.0]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            LowRankCoupling(np.full((2, 3), 1 / 6), np.full((2, 4), 1 / 8), np.array([0.5, 0.5]))


class TestMaterializeDense:
    def test_rank_one_uniform_scaled(self):
        n = 5
        p = np.full(n, 1.0 / n)
        coupling = glue(p[None, :], p[None, :], np.array([1.0]))
        assert np.allclose(materialize_dense(coupling, scaled=True), 1.0 / n, atol=1e-15)

    def test_row_sums_are_query_marginal(self):
        coupling, *_ = solved_coupling(seed=2, n=24, r=4)
        dense = materialize_dense(coupling)
        assert np.abs(dense.sum(axis=1) - 1 / 24).max() < 1e-12

    def test_matches_oracle_on_16x4(self):
        coupling, *_ = solved_coupling(seed=3, n=16, r=4)
        expected = dense_triple_product(coupling.gamma1, coupling.gamma2, coupling.sigma)
        assert np.abs(materialize_dense(coupling) - expected).max() < 1e-12

    def test_scaled_requires_uniform_marginals(self):
        sigma = np.array([1.0])
        coupling = glue(np.array([[0.25, 0.75]]), np.array([[0.5, 0.5]]), sigma)
        with pytest.raises(InvalidInputError):
            materialize_dense(coupling, scaled=True)

    def test_size_guard(self):
        n = 4097
        coupling = glue(np.full((1, n), 1.0 / n), np.full((1, n), 1.0 / n), np.array([1.0]))
        with pytest.raises(UnsupportedSizeError):
            materialize_dense(coupling)


class TestApplyToValues:
    def test_preserves_constant_values(self):
        coupling, *_ = solved_coupling(seed=4, n=20, r=4)
        ones = np.ones((20, 1))
        out = apply_to_values(coupling, ones, scaled=True)
        assert np.abs(out.outputs - 1.0).max() < 1e-12

    def test_single_pivot_gives_column_mean(self):
        n = 8
        p = np.full(n, 1.0 / n)
        coupling = glue(p[None, :], p[None, :], np.array([1.0]))
        rng = np.random.default_rng(5)
        V = rng.normal(size=(n, 3))
        out = apply_to_values(coupling, V, scaled=True)
        assert np.allclose(out.outputs, np.tile(V.mean(axis=0), (n, 1)), atol=1e-12)

    def test_matches_dense_application(self):
        coupling, *_ = solved_coupling(seed=6, n=16, r=4)
        rng = np.random.default_rng(7)
        V = rng.normal(size=(16, 3))
        fast = apply_to_values(coupling, V, scaled=True).outputs
        dense = materialize_dense(coupling, scaled=True) @ V
        assert np.abs(fast - dense).max() < 1e-10

    def test_rejects_wrong_row_count(self):
        coupling, *_ = solved_coupling(seed=8, n=6, r=2)
        with pytest.raises(ShapeMismatchError):
            apply_to_values(coupling, np.zeros((5, 2)))

    @pytest.mark.parametrize("n,r", [(32, 2), (64, 8), (256, 32)])
    def test_oracle_equivalence_across_sizes(self, n, r):
        coupling, *_ = solved_coupling(seed=n + r, n=n, r=r)
        rng = np.random.default_rng(9)
        V = rng.normal(size=(n, 5))
        fast = apply_to_values(coupling, V, scaled=True).outputs
        dense = materialize_dense(coupling, scaled=True) @ V
        assert np.abs(fast - dense).max() < 1e-10


class TestLotAttention:
    def test_single_token_returns_value(self):
        pivot = PivotMeasure.uniform(np.array([[0.3, -0.2]]))
        out = lot_attention(np.array([[1.0, 2.0]]), np.array([[0.5, 0.1]]), np.array([[7.0, -3.0]]), pivot)
        assert np.allclose(out.outputs, [[7.0, -3.0]], atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        n, d = 12, 4
        Q, K, V = (random_tokens(rng, n, d) for _ in range(3))
        pivot = PivotMeasure.random(3, d, rng)
        perm = rng.permutation(n)
        base = lot_attention(Q, K, V, pivot, iters=30).outputs
        permuted = lot_attention(Q[perm], K[perm], V[perm], pivot, iters=30).outputs
        assert np.abs(permuted - base[perm]).max() < 1e-12

    def test_matches_fully_dense_reference_pipeline(self):
        # independent oracle: multiplicative-domain Sinkhorn + explicit triple
        # product + dense matmul, assembled from scratch
        rng = np.random.default_rng(11)
        n, r, d, eps, iters = 8, 2, 3, 1.0, 50
        Q, K, V = (random_tokens(rng, n, d) for _ in range(3))
        pivot = PivotMeasure.random(r, d, rng)

        def reference_plan(scores, row_m, col_m, final_axis):
            kernel = np.exp(scores / eps)
            u = np.ones(len(row_m))
            v = np.ones(len(col_m))
            for _ in range(iters):
                if final_axis == "row":
                    v = col_m / (kernel.T @ u)
                    u = row_m / (kernel @ v)
                else:
                    u = row_m / (kernel @ v)
                    v = col_m / (kernel.T @ u)
            return u[:, None] * kernel * v[None, :]

        p_tok = np.full(n, 1.0 / n)
        g1 = reference_plan(pivot.locations @ Q.T, pivot.masses, p_tok, "col")
        g2 = reference_plan(pivot.locations @ K.T, pivot.masses, p_tok, "row")
        dense = g1.T @ np.diag(1.0 / pivot.masses) @ g2
        expected = n * dense @ V

        got = lot_attention(Q, K, V, pivot, epsilon=eps, iters=iters, tolerance=0.0).outputs
        assert np.abs(got - expected).max() < 1e-9

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        Q, K, V = (random_tokens(rng, 10, 4) for _ in range(3))
        pivot = PivotMeasure.random(3, 4, rng)
        a = lot_attention(Q, K, V, pivot).outputs
        b = lot_attention(Q, K, V, pivot).outputs
        assert np.array_equal(a, b)


class TestDoublyStochastic:
    @pytest.mark.parametrize("n,r", [(16, 2), (16, 8), (64, 8), (64, 32)])
    def test_scaled_row_sums_exact(self, n, r):
        coupling, *_ = solved_coupling(seed=13, n=n, r=r, eps=0.5)
        A = materialize_dense(coupling, scaled=True)
        assert np.abs(A.sum(axis=1) - 1.0).max() < 1e-12

    def test_column_residual_bound_honored(self):
        for seed in range(5):
            coupling, *_ = solved_coupling(seed=seed, n=32, r=4, iters=6, tol=1e-15)
            dense = materialize_dense(coupling)
            col_err = np.abs(dense.sum(axis=0) - 1 / 32).sum()
            assert col_err <= coupling.col_residual_bound + 1e-13

    def test_column_residual_shrinks_with_iters(self):
        rng = np.random.default_rng(14)
        n, r, d = 24, 4, 4
        Q, K = random_tokens(rng, n, d), random_tokens(rng, n, d)
        pivot = PivotMeasure.random(r, d, rng)
        errs = []
        for iters in [1, 5, 10, 20, 50]:
            coupling, _, _ = solve_coupling(Q, K, pivot, 0.5, iters, tolerance=0.0)
            A = materialize_dense(coupling, scaled=True)
            errs.append(np.abs(A.sum(axis=0) - 1.0).max())
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))

    def test_nonnegativity(self):
        coupling, *_ = solved_coupling(seed=15, n=20, r=3)
        assert np.all(coupling.gamma1 >= 0)
        assert np.all(coupling.gamma2 >= 0)
        assert np.all(materialize_dense(coupling) >= 0)


class TestNumericalRank:
    def test_rank_one_uniform(self):
        assert numerical_rank(np.full((6, 6), 1.0 / 6)) == 1

    def test_identity(self):
        assert numerical_rank(np.eye(4)) == 4

    def test_glued_coupling_rank_equals_r(self):
        coupling, *_ = solved_coupling(seed=16, n=32, r=4)
        A = materialize_dense(coupling, scaled=True)
        assert numerical_rank(A) == 4

    @pytest.mark.parametrize("n,r", [(16, 2), (48, 6), (16, 32)])
    def test_rank_bound(self, n, r):
        coupling, *_ = solved_coupling(seed=17, n=n, r=r)
        A = materialize_dense(coupling, scaled=True)
        assert numerical_rank(A) <= min(r, n)


class TestSoftClusters:
    def test_single_pivot_is_full_marginal(self):
        n = 6
        p = np.full(n, 1.0 / n)
        coupling = glue(p[None, :], p[None, :], np.array([1.0]))
        clusters = soft_clusters(coupling, side="query")
        assert clusters.shape == (1, n)
        assert np.allclose(clusters[0], p)

    def test_clusters_sum_to_token_marginal(self):
        coupling, *_ = solved_coupling(seed=18, n=18, r=3)
        clusters = soft_clusters(coupling, side="query")
        assert np.abs(clusters.sum(axis=0) - 1 / 18).max() < 1e-12

    def test_matches_dense_sinkhorn_rows(self):
        # oracle: rows of the query-side plan solved independently
        rng = np.random.default_rng(19)
        n, r, d = 6, 2, 3
        Q, K = random_tokens(rng, n, d), random_tokens(rng, n, d)
        pivot = PivotMeasure.random(r, d, rng)
        coupling, plan_q, _ = solve_coupling(Q, K, pivot, 1.0, 100, 1e-13)
        prob = ot.SinkhornProblem(
            pivot.locations @ Q.T, pivot.masses, np.full(n, 1 / n), 1.0, 100, 1e-13
        )
        oracle_rows = ot.sinkhorn(prob, final_axis="col").plan
        clusters = soft_clusters(coupling, side="query")
        assert np.abs(clusters - oracle_rows).max() < 1e-14

    def test_key_side(self):
        coupling, *_ = solved_coupling(seed=20, n=10, r=2)
        assert np.array_equal(soft_clusters(coupling, side="key"), coupling.gamma2)

    def test_rejects_unknown_side(self):
        coupling, *_ = solved_coupling(seed=21, n=4, r=2)
        with pytest.raises(InvalidInputError):
            soft_clusters(coupling, side="both")


class TestClusterDecomposition:
    def test_residual_tiny_on_random_instance(self):
        coupling, *_ = solved_coupling(seed=22, n=16, r=4)
        assert cluster_decomposition_residual(coupling) <= 1e-12

    def test_residual_tiny_rank_one(self):
        p = np.full(8, 1.0 / 8)
        coupling = glue(p[None, :], p[None, :], np.array([1.0]))
        assert cluster_decomposition_residual(coupling) <= 1e-12


class TestLotVsOtGap:
    def test_gap_nonnegative_feasible_point(self):
        rng = np.random.default_rng(23)
        n, d = 4, 3
        Q, K = random_tokens(rng, n, d), random_tokens(rng, n, d)
        pivot = PivotMeasure.random(2, d, rng)
        gap = lot_vs_ot_gap(Q, K, pivot, epsilon=0.1, iters=3000)
        assert gap >= -1e-9

    def test_single_pivot_independent_coupling_gap(self):
        # r=1 glued plan is the independent coupling; its cost minus OT >= 0
        rng = np.random.default_rng(24)
        n, d = 5, 3
        Q, K = random_tokens(rng, n, d), random_tokens(rng, n, d)
        pivot = PivotMeasure.random(1, d, rng)
        gap = lot_vs_ot_gap(Q, K, pivot, epsilon=0.5, iters=500)
        scores = Q @ K.T
        independent_cost = -scores.mean()
        exact_cost, _ = ot.exact_ot_tiny(-scores)
        assert gap == pytest.approx(independent_cost - exact_cost, abs=1e-9)
        assert gap >= -1e-9

    def test_size_guard(self):
        rng = np.random.default_rng(25)
        Q, K = random_tokens(rng, 9, 2), random_tokens(rng, 9, 2)
        with pytest.raises(UnsupportedSizeError):
            lot_vs_ot_gap(Q, K, PivotMeasure.random(2, 2, rng))
