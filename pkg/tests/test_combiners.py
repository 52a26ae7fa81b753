import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtlopt.combiners import (
    SolverError,
    cagrad_dual_objective,
    combine_cagrad,
    combine_fairgrad,
    combine_ls,
    combine_pcgrad,
    fairgrad_residual,
    fairgrad_weights,
    min_norm_weights,
    project_conflict,
    project_simplex,
)
from mtlopt.conflict import GradientMatrix


def fairgrad_bisection_oracle(gram, alpha):
    """Independent nested-bisection solver for the K=2 fixed-point system."""

    def solve_w1(w2):
        lo, hi = 1e-12, 1e12
        for _ in range(200):
            mid = np.sqrt(lo * hi)
            if gram[0, 0] * mid + gram[0, 1] * w2 - mid ** (-1.0 / alpha) > 0:
                hi = mid
            else:
                lo = mid
        return np.sqrt(lo * hi)

    def outer(w2):
        w1 = solve_w1(w2)
        return gram[1, 0] * w1 + gram[1, 1] * w2 - w2 ** (-1.0 / alpha)

    grid = np.exp(np.linspace(np.log(1e-6), np.log(1e6), 600))
    values = [outer(w2) for w2 in grid]
    lo = hi = None
    for i in range(len(grid) - 1):
        if values[i] <= 0.0 <= values[i + 1]:
            lo, hi = grid[i], grid[i + 1]
            break
    assert lo is not None, "oracle failed to bracket the solution"
    for _ in range(200):
        mid = np.sqrt(lo * hi)
        if outer(mid) > 0:
            hi = mid
        else:
            lo = mid
    w2 = np.sqrt(lo * hi)
    return np.array([solve_w1(w2), w2])


class TestProjectSimplex:
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8))
    @settings(max_examples=50, deadline=None)
    def test_output_is_on_simplex(self, seed, k):
        v = np.random.default_rng(seed).normal(size=k) * 5
        w = project_simplex(v)
        assert (w >= 0).all()
        assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_interior_point_unchanged(self):
        v = np.array([0.25, 0.25, 0.5])
        np.testing.assert_allclose(project_simplex(v), v, atol=1e-12)


class TestLs:
    def test_mean_of_rows(self):
        assert (combine_ls(GradientMatrix([[1.0, 0.0], [0.0, 1.0]])) == [0.5, 0.5]).all()

    def test_identical_rows(self):
        assert (combine_ls(GradientMatrix([[2.0, 3.0], [2.0, 3.0]])) == [2.0, 3.0]).all()

    def test_opposing_rows_cancel(self):
        assert (combine_ls(GradientMatrix([[1.0, 0.0], [-1.0, 0.0]])) == [0.0, 0.0]).all()


class TestPcgrad:
    def test_projection_hand_example_exact(self):
        out = project_conflict(np.array([1.0, 0.0]), np.array([-1.0, 1.0]))
        assert np.max(np.abs(out - [0.5, 0.5])) <= 1e-12

    def test_non_conflicting_equals_ls(self, rng):
        rows = np.abs(rng.normal(size=(3, 4))) + 0.1  # all-positive rows never conflict
        g = GradientMatrix(rows)
        np.testing.assert_allclose(combine_pcgrad(g, seed=1), combine_ls(g), atol=1e-15)

    def test_zero_row_guarded(self):
        g = GradientMatrix([[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(combine_pcgrad(g, seed=0), [0.5, 0.0])

    def test_post_surgery_non_conflict_with_last_target(self, rng):
        # after processing, each adjusted row is non-conflicting with the row
        # it was last projected on
        from mtlopt.autodiff import substream

        rows = rng.normal(size=(4, 6))
        g = GradientMatrix(rows)
        shuffle = substream(7, "pcgrad-shuffle")
        for i in range(4):
            order = [j for j in range(4) if j != i]
            shuffle.shuffle(order)
            gi = rows[i].copy()
            last_projected = None
            for j in order:
                new = project_conflict(gi, rows[j])
                if not np.array_equal(new, gi):
                    last_projected = j
                gi = new
            if last_projected is not None:
                assert float(gi @ rows[last_projected]) >= -1e-10

    def test_seeded_shuffle_is_deterministic(self, rng):
        g = GradientMatrix(rng.normal(size=(5, 8)))
        assert (combine_pcgrad(g, seed=3) == combine_pcgrad(g, seed=3)).all()


class TestCagrad:
    def test_c_zero_returns_mean_exactly(self, rng):
        g = GradientMatrix(rng.normal(size=(3, 5)))
        assert (combine_cagrad(g, c=0.0) == g.mean).all()

    def test_identical_rows_collinear(self):
        g = GradientMatrix([[1.0, 2.0], [1.0, 2.0]])
        d = combine_cagrad(g, c=0.5)
        cross = d[0] * 2.0 - d[1] * 1.0
        assert abs(cross) <= 1e-9

    def test_negative_c_rejected(self, rng):
        with pytest.raises(ValueError):
            combine_cagrad(GradientMatrix(rng.normal(size=(2, 3))), c=-0.1)

    def test_feasibility(self, rng):
        for _ in range(20):
            g = GradientMatrix(rng.normal(size=(3, 6)))
            c = 0.5
            d = combine_cagrad(g, c=c)
            assert np.linalg.norm(d - g.mean) <= c * np.linalg.norm(g.mean) + 1e-9

    def test_dual_matches_grid_search_k2(self):
        rng = np.random.default_rng(42)
        ts = np.linspace(0.0, 1.0, 2001)
        for _ in range(50):
            g = GradientMatrix(rng.normal(size=(2, 6)))
            c = 0.5
            gram = g.gram()
            gram_g0 = g.rows @ g.mean
            sqrt_phi = c * np.linalg.norm(g.mean)
            oracle = min(
                cagrad_dual_objective(np.array([t, 1.0 - t]), gram, gram_g0, sqrt_phi)
                for t in ts
            )
            _, _, solver_value = combine_cagrad(g, c=c, return_weights=True)
            assert abs(solver_value - oracle) <= 1e-6


class TestFairgrad:
    def test_symmetric_rows_symmetric_weights(self):
        g = GradientMatrix([[1.0, 2.0, 0.0], [1.0, 2.0, 0.0]])
        w = fairgrad_weights(g, alpha=3.0)
        assert w[0] == pytest.approx(w[1], rel=1e-8)

    def test_unit_gram_hand_solution(self):
        # two unit-norm copies: Gram is all ones, 2w = 1/w so w = 1/sqrt(2)
        g = GradientMatrix([[1.0, 0.0], [1.0, 0.0]])
        w = fairgrad_weights(g, alpha=1.0)
        np.testing.assert_allclose(w, 1.0 / np.sqrt(2.0), atol=1e-8)
        assert np.abs(fairgrad_residual(w, g.gram(), 1.0)).max() <= 1e-8

    def test_residual_at_return(self, rng):
        for _ in range(20):
            g = GradientMatrix(rng.normal(size=(3, 5)))
            w = fairgrad_weights(g, alpha=2.0)
            assert np.abs(fairgrad_residual(w, g.gram(), 2.0)).max() <= 1e-8

    def test_matches_nested_bisection_oracle(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            g = GradientMatrix(rng.normal(size=(2, 5)))
            w = fairgrad_weights(g, alpha=2.0)
            oracle = fairgrad_bisection_oracle(g.gram(), 2.0)
            assert np.max(np.abs(w - oracle)) <= 1e-5

    def test_zero_norm_row_is_error(self):
        with pytest.raises(SolverError):
            fairgrad_weights(GradientMatrix([[1.0, 0.0], [0.0, 0.0]]), alpha=2.0)

    def test_invalid_alpha(self, rng):
        with pytest.raises(ValueError):
            combine_fairgrad(GradientMatrix(rng.normal(size=(2, 3))), alpha=0.0)


class TestMinNorm:
    def test_perfect_opposition(self):
        w = min_norm_weights(GradientMatrix([[1.0, 0.0], [-1.0, 0.0]]))
        np.testing.assert_allclose(w.omega, [0.5, 0.5], atol=1e-9)

    def test_orthogonal_pair(self):
        g = GradientMatrix([[1.0, 0.0], [0.0, 1.0]])
        w = min_norm_weights(g)
        np.testing.assert_allclose(w.omega, [0.5, 0.5], atol=1e-9)
        assert np.linalg.norm(g.rows.T @ w.omega) == pytest.approx(np.sqrt(0.5), abs=1e-9)

    def test_identical_rows_norm(self):
        g = GradientMatrix([[2.0, 1.0], [2.0, 1.0]])
        w = min_norm_weights(g)
        assert np.linalg.norm(g.rows.T @ w.omega) == pytest.approx(
            np.linalg.norm([2.0, 1.0]), abs=1e-10
        )

    def test_matches_k2_closed_form(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            g = GradientMatrix(rng.normal(size=(2, 4)))
            g1, g2 = g.rows
            gamma = float(np.clip(((g2 - g1) @ g2) / ((g1 - g2) @ (g1 - g2)), 0.0, 1.0))
            oracle = np.linalg.norm(gamma * g1 + (1.0 - gamma) * g2)
            solver = np.linalg.norm(g.rows.T @ min_norm_weights(g).omega)
            assert abs(solver - oracle) <= 1e-10

    def test_beats_random_simplex_sampling_k4(self, rng):
        g = GradientMatrix(rng.normal(size=(4, 6)))
        solver = np.linalg.norm(g.rows.T @ min_norm_weights(g).omega)
        samples = rng.dirichlet(np.ones(4), size=1_000_000)
        sampled = np.sqrt(np.einsum("ij,jk,ik->i", samples, g.gram(), samples).min())
        assert solver <= sampled + 1e-4

    def test_weights_on_simplex(self, rng):
        w = min_norm_weights(GradientMatrix(rng.normal(size=(5, 7))))
        assert w.on_simplex
        assert (w.omega >= 0).all()
        assert w.omega.sum() == pytest.approx(1.0, abs=1e-9)
