import numpy as np
import pytest

from ntkmoe.expert import (FactorizationError, active_select, assemble_patch, factorize,
                           fit_expert, log_marginal_likelihood, mll_and_grad,
                           optimize_mll, predict, predict_batch)

LOG_2PI = np.log(2 * np.pi)


def weight_space_posterior(Phi, y, delta, sigma0, phi_star):
    """Bayesian linear regression with prior N(0, I/delta) and noise sigma0."""
    P = Phi.shape[1]
    A = Phi.T @ Phi / sigma0 + delta * np.eye(P)
    cov = np.linalg.inv(A)
    mean_w = cov @ Phi.T @ y / sigma0
    mean = phi_star @ mean_w
    var = np.einsum("ij,jk,ik->i", phi_star, cov, phi_star) + sigma0
    return mean, var


def dense_lml(Phi, y, delta, sigma0):
    C = Phi @ Phi.T / delta + sigma0 * np.eye(len(y))
    _, logdet = np.linalg.slogdet(C)
    return -0.5 * y @ np.linalg.inv(C) @ y - 0.5 * logdet - 0.5 * len(y) * LOG_2PI


def refit_variance(seed, chosen, pool, delta, sigma0):
    Phi = np.vstack([seed, pool[chosen]]) if len(chosen) else seed
    e = fit_expert(Phi, np.zeros(Phi.shape[0]), np.log(delta), np.log(sigma0))
    return predict_batch(e, pool).variance


class TestAssemble:
    def test_no_neighbors(self, rng):
        A = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(assemble_patch(A), A)

    def test_row_count_and_order(self, rng):
        A, B, C = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), np.zeros((0, 3))
        out = assemble_patch(A, [B, C])
        assert out.shape == (6, 3)
        np.testing.assert_array_equal(out[4:], B)


class TestFit:
    def test_single_point(self):
        e = fit_expert(np.array([[1.0, 1.0]]), [3.0], 0.0, 0.0)
        np.testing.assert_allclose(e.coeffs, [1.0])

    def test_zero_targets(self, rng):
        e = fit_expert(rng.normal(size=(5, 4)), np.zeros(5), 0.3, -1.0)
        np.testing.assert_array_equal(e.coeffs, 0.0)
        np.testing.assert_allclose(predict_batch(e, rng.normal(size=(3, 4))).mean, 0.0)

    def test_factor_reconstructs(self, rng):
        Phi = rng.normal(size=(12, 5))
        e = fit_expert(Phi, rng.normal(size=12), np.log(0.5), np.log(0.1))
        C = Phi @ Phi.T / 0.5 + (0.1 + e.jitter) * np.eye(12)
        L = e.chol
        assert np.allclose(L, np.tril(L)) and np.all(np.diag(L) > 0)
        np.testing.assert_allclose(L @ L.T, C, rtol=1e-8)

    def test_solve_consistency(self, rng):
        Phi = rng.normal(size=(10, 4))
        y = rng.normal(size=10)
        e = fit_expert(Phi, y, 0.0, np.log(0.2))
        K = Phi @ Phi.T
        np.testing.assert_allclose(K @ e.coeffs + (0.2 + e.jitter) * e.coeffs, y, rtol=1e-8)

    def test_target_count_checked(self, rng):
        with pytest.raises(ValueError):
            fit_expert(rng.normal(size=(3, 2)), np.zeros(4), 0.0, 0.0)

    def test_jitter_escalates(self):
        L, jitter = factorize(np.ones((5, 5)), 1.0, 1e-300)
        assert jitter > 0
        assert np.all(np.diag(L) > 0)

    def test_factorisation_failure(self):
        with pytest.raises(FactorizationError):
            factorize(-np.eye(3), 1.0, 1e-300)


class TestPredict:
    def test_orthogonal_point_gets_prior(self):
        e = fit_expert(np.array([[1.0, 0.0, 0.0]]), [2.0], np.log(0.5), np.log(0.3))
        mean, var = predict(e, np.array([0.0, 2.0, 0.0]))
        assert mean == 0.0
        assert var == pytest.approx(4.0 / 0.5 + 0.3, rel=1e-14)

    def test_single_point_closed_form(self):
        phi = np.array([1.0, 1.0])
        e = fit_expert(phi[None, :], [3.0], 0.0, 0.0)
        mean, var = predict(e, phi)
        assert var == pytest.approx(5.0 / 3.0, rel=1e-14)
        assert mean == pytest.approx(2.0, rel=1e-14)

    def test_contraction_at_training_inputs(self, rng):
        Phi = rng.normal(size=(8, 6))
        e = fit_expert(Phi, rng.normal(size=8), 0.0, np.log(0.1))
        prior = np.sum(Phi * Phi, axis=1) + 0.1
        assert np.all(predict_batch(e, Phi).variance <= prior)

    def test_duality_with_weight_space(self):
        for seed in range(50):
            r = np.random.default_rng(seed)
            n, P = int(r.integers(1, 21)), int(r.integers(1, 51))
            Phi = r.normal(size=(n, P))
            y = r.normal(size=n)
            delta, sigma0 = float(r.uniform(0.1, 3)), float(r.uniform(0.05, 2))
            star = r.normal(size=(5, P))
            e = fit_expert(Phi, y, np.log(delta), np.log(sigma0))
            assert e.jitter == 0.0
            d = predict_batch(e, star)
            mean, var = weight_space_posterior(Phi, y, delta, sigma0, star)
            np.testing.assert_allclose(d.mean, mean, rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(d.variance, var, rtol=1e-8)

    def test_more_data_never_increases_variance(self, rng):
        Phi = rng.normal(size=(15, 10))
        star = rng.normal(size=(20, 10))
        prev = None
        for n in range(1, 16):
            v = predict_batch(fit_expert(Phi[:n], np.zeros(n), 0.0, np.log(0.2)), star).variance
            if prev is not None:
                assert np.all(v <= prev * (1 + 1e-8))
            prev = v


class TestMarginalLikelihood:
    def test_single_point(self):
        e = fit_expert(np.array([[1.0, 1.0]]), [3.0], 0.0, 0.0)
        expected = -0.5 * 3.0 - 0.5 * np.log(3.0) - 0.5 * LOG_2PI
        assert log_marginal_likelihood(e) == pytest.approx(expected, rel=1e-14)

    def test_zero_targets(self, rng):
        e = fit_expert(rng.normal(size=(6, 3)), np.zeros(6), 0.0, 0.0)
        expected = -np.sum(np.log(np.diag(e.chol))) - 3 * LOG_2PI
        assert log_marginal_likelihood(e) == pytest.approx(expected, rel=1e-14)

    def test_dense_oracle(self, rng):
        for _ in range(10):
            Phi = rng.normal(size=(9, 4))
            y = rng.normal(size=9)
            d, s = float(rng.uniform(0.2, 2)), float(rng.uniform(0.1, 1))
            e = fit_expert(Phi, y, np.log(d), np.log(s))
            assert log_marginal_likelihood(e) == pytest.approx(dense_lml(Phi, y, d, s),
                                                               rel=1e-10)

    def test_permutation_invariant(self, rng):
        Phi = rng.normal(size=(12, 5))
        y = rng.normal(size=12)
        perm = rng.permutation(12)
        a = log_marginal_likelihood(fit_expert(Phi, y, 0.1, -1.0))
        b = log_marginal_likelihood(fit_expert(Phi[perm], y[perm], 0.1, -1.0))
        assert abs(a - b) <= 1e-8

    def test_gradient_finite_differences(self, rng):
        Phi = rng.normal(size=(10, 4))
        G = Phi @ Phi.T
        y = rng.normal(size=10)
        for _ in range(10):
            h = rng.uniform(-2, 1, size=2)
            _, grad, _ = mll_and_grad(G, y, *h)
            eps = 1e-5
            fd = [(mll_and_grad(G, y, *(h + eps * u))[0]
                   - mll_and_grad(G, y, *(h - eps * u))[0]) / (2 * eps) for u in np.eye(2)]
            np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)

    def test_value_matches_dense(self, rng):
        Phi = rng.normal(size=(7, 3))
        y = rng.normal(size=7)
        f, _, _ = mll_and_grad(Phi @ Phi.T, y, np.log(0.7), np.log(0.4))
        assert f == pytest.approx(dense_lml(Phi, y, 0.7, 0.4), rel=1e-10)


class TestOptimize:
    def test_zero_iterations(self, rng):
        h = optimize_mll(rng.normal(size=(5, 3)), rng.normal(size=5), (0.2, -0.3), 0)
        assert h == (0.2, -0.3)
        assert all(type(v) is float for v in h)

    def test_never_worse(self, rng):
        for _ in range(5):
            Phi = rng.normal(size=(20, 6))
            y = Phi @ rng.normal(size=6) + 0.1 * rng.normal(size=20)
            init = tuple(rng.uniform(-3, 1, size=2))
            h, hist = optimize_mll(Phi, y, init, 30, return_history=True)
            assert all(b >= a for a, b in zip(hist, hist[1:]))
            G = Phi @ Phi.T
            assert mll_and_grad(G, y, *h)[0] >= mll_and_grad(G, y, *init)[0]

    def test_recovers_noise_scale(self, rng):
        Phi = rng.normal(size=(200, 3))
        y = Phi @ np.array([1.0, -2.0, 0.5]) + 0.3 * rng.normal(size=200)
        _, log_s = optimize_mll(Phi, y, (0.0, 0.0), 300)
        assert 0.05 < np.exp(log_s) < 0.2

    def test_negative_iterations(self):
        with pytest.raises(ValueError):
            optimize_mll(np.ones((2, 2)), np.ones(2), (0.0, 0.0), -1)


class TestActiveSelect:
    def test_full_budget(self, rng):
        pool = rng.normal(size=(6, 4))
        sel = active_select(rng.normal(size=(3, 4)), pool, 6, 0.0, np.log(0.1))
        assert sorted(sel) == list(range(6))

    def test_first_pick_is_max_variance(self, rng):
        for _ in range(10):
            seed, pool = rng.normal(size=(4, 5)), rng.normal(size=(12, 5))
            var = refit_variance(seed, [], pool, 1.0, 0.1)
            assert active_select(seed, pool, 1, 0.0, np.log(0.1))[0] == int(np.argmax(var))

    def test_greedy_sequence_matches_refits(self, rng):
        seed, pool = rng.normal(size=(3, 6)), rng.normal(size=(15, 6))
        delta, sigma0 = 0.5, 0.05
        chosen = []
        for _ in range(8):
            var = refit_variance(seed, chosen, pool, delta, sigma0)
            var[chosen] = -np.inf
            chosen.append(int(np.argmax(var)))
        sel = active_select(seed, pool, 8, np.log(delta), np.log(sigma0))
        np.testing.assert_array_equal(sel, chosen)

    def test_duplicate_selected_last(self, rng):
        base = rng.normal(size=(3, 5))
        pool = np.vstack([base, base[0]])
        sel = active_select(np.zeros((0, 5)), pool, 4, 0.0, np.log(1e-3))
        # after one twin is chosen the other's variance is near the noise floor
        first_twin = sel[[i for i, s in enumerate(sel) if s in (0, 3)][0]]
        twin = 3 if first_twin == 0 else 0
        assert sel[-1] == twin

    def test_pool_permutation(self, rng):
        seed, pool = rng.normal(size=(4, 5)), rng.normal(size=(10, 5))
        perm = rng.permutation(10)
        a = active_select(seed, pool, 5, 0.0, -2.0)
        b = active_select(seed, pool[perm], 5, 0.0, -2.0)
        np.testing.assert_array_equal(perm[b], a)

    def test_budget_errors(self, rng):
        pool = rng.normal(size=(3, 2))
        with pytest.raises(ValueError):
            active_select(np.zeros((0, 2)), pool, 4, 0.0, 0.0)
        with pytest.raises(ValueError):
            active_select(np.zeros((0, 2)), pool, -1, 0.0, 0.0)
        assert active_select(np.zeros((0, 2)), pool, 0, 0.0, 0.0).size == 0
