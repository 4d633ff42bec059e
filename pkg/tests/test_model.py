import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _helpers import central_difference, random_instance, rel_err
from glarmasel.model import (ClampWarning, GlarmaParams, IndefiniteCurvatureWarning,
                             PanelData, RecursionOverflowError, eta_second_derivatives,
                             forward_recursion, hessian_eta, hessian_eta_blocks,
                             hessian_gamma, log_likelihood, score_eta, score_gamma)

E1 = np.exp(0.5)


def scalar_recursion(eta, gamma, y):
    """Plain loop over one series, independent of the vectorized code."""
    T = len(y)
    W, E = [0.0] * T, [0.0] * T
    for t in range(T):
        W[t] = eta[t] + sum(gamma[k - 1] * E[t - k] for k in range(1, len(gamma) + 1)
                            if t - k >= 0)
        E[t] = y[t] * np.exp(-W[t]) - 1.0
    return np.array(W), np.array(E)


@pytest.fixture
def worked():
    data = PanelData(np.array([[1, 2, 0]]), np.array([0]))
    return GlarmaParams(np.zeros((1, 3)), [0.5]), data


class TestPanelData:
    def test_from_array_layout(self):
        Y = np.arange(2 * 3 * 4).reshape(2, 3, 4)
        d = PanelData.from_array(Y)
        assert (d.I, d.T, d.n_series) == (2, 4, 6)
        assert d.cell(1, 2, 3) == Y[1, 2, 3]
        np.testing.assert_array_equal(d.to_array(), Y)

    def test_unequal_replicates(self):
        d = PanelData.from_blocks([np.ones((2, 3)), np.zeros((4, 3))])
        np.testing.assert_array_equal(d.rep_counts, [2, 4])
        np.testing.assert_allclose(d.condition_means(), [[1, 1, 1], [0, 0, 0]])
        with pytest.raises(ValueError):
            d.to_array()

    @pytest.mark.parametrize("counts, cond", [
        ([[-1, 2]], [0]),
        ([[1.5, 2]], [0]),
        ([[np.nan, 2]], [0]),
        ([[1, 2], [3, 4]], [1, 0]),
        ([[1, 2], [3, 4]], [0, 2]),
    ])
    def test_rejects_invalid(self, counts, cond):
        with pytest.raises(ValueError):
            PanelData(np.array(counts, dtype=float), np.array(cond))

    def test_counts_read_only(self):
        d = PanelData(np.array([[1, 2]]), np.array([0]))
        with pytest.raises(ValueError):
            d.counts[0, 0] = 5


class TestParams:
    def test_q(self):
        assert GlarmaParams(np.zeros((1, 2)), [0.1, 0.2]).q == 2
        assert GlarmaParams(np.zeros((1, 2)), []).q == 0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            GlarmaParams(np.array([[np.inf]]), [])
        with pytest.raises(ValueError):
            GlarmaParams(np.zeros((1, 1)), [np.nan])


class TestRecursion:
    def test_worked_instance(self, worked):
        ws = forward_recursion(*worked)
        np.testing.assert_allclose(ws.W[0], [0, 0, 0.5])
        np.testing.assert_allclose(ws.E[0], [0, 1, -1])

    def test_zero_counts(self):
        data = PanelData(np.zeros((1, 3)), np.array([0]))
        ws = forward_recursion(GlarmaParams(np.zeros((1, 3)), [0.5]), data)
        np.testing.assert_allclose(ws.W[0], [0, -0.5, -0.5])
        np.testing.assert_allclose(ws.E[0], [-1, -1, -1])

    def test_matches_scalar_loop(self, rng):
        for _ in range(10):
            params, data = random_instance(rng)
            ws = forward_recursion(params, data)
            for s in range(data.n_series):
                i = data.condition[s]
                W, E = scalar_recursion(params.eta[i], params.gamma, data.counts[s])
                np.testing.assert_allclose(ws.W[s], W, rtol=1e-13, atol=1e-13)
                np.testing.assert_allclose(ws.E[s], E, rtol=1e-13, atol=1e-13)

    def test_q0_is_eta(self, rng):
        data = PanelData.from_array(rng.poisson(2, size=(2, 3, 5)))
        eta = rng.standard_normal((2, 5))
        ws = forward_recursion(GlarmaParams(eta, []), data)
        np.testing.assert_array_equal(ws.W, eta[data.condition])

    def test_residual_identity(self, rng):
        params, data = random_instance(rng, I=3, J=4, T=15, q=2)
        ws = forward_recursion(params, data)
        np.testing.assert_allclose(ws.E * ws.mu + ws.mu, data.counts, rtol=1e-12, atol=1e-12)

    def test_overflow_names_cell(self):
        # E at t=0 is about e^50, which the huge gamma turns into an infinite W
        data = PanelData(np.array([[1, 1]]), np.array([0]))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(RecursionOverflowError, match=r"i=0, j=0, t=1"):
                forward_recursion(GlarmaParams(np.array([[-60.0, 0.0]]), [1e300]), data)

    def test_clamp_warns_and_counts(self):
        data = PanelData(np.array([[0, 0]]), np.array([0]))
        with pytest.warns(ClampWarning):
            ws = forward_recursion(GlarmaParams(np.array([[60.0, -70.0]]), []), data)
        assert ws.n_clamped == 2
        assert ws.mu[0, 0] == np.exp(50.0)

    def test_causality(self, rng):
        params, data = random_instance(rng, I=2, J=3, T=12, q=3)
        base = forward_recursion(params, data).W
        for t0 in range(data.T):
            eta = params.eta.copy()
            eta[1, t0] += 0.37
            W = forward_recursion(GlarmaParams(eta, params.gamma), data).W
            np.testing.assert_array_equal(W[:, :t0], base[:, :t0])
            np.testing.assert_array_equal(W[data.condition == 0], base[data.condition == 0])


class TestLikelihood:
    def test_worked_instance(self, worked):
        assert log_likelihood(*worked) == pytest.approx(-2 - E1, abs=1e-12)

    def test_all_zero(self):
        data = PanelData(np.zeros((6, 4)), np.repeat([0, 1], 3))
        assert log_likelihood(GlarmaParams(np.zeros((2, 4)), [0.0]), data) == -24.0

    def test_saturated_glm(self, rng):
        data = PanelData.from_array(rng.poisson(4, size=(2, 3, 6)) + 1)
        ybar = data.condition_means()
        L = log_likelihood(GlarmaParams(np.log(ybar), []), data)
        expected = np.sum(data.counts * np.log(ybar)[data.condition] - ybar[data.condition])
        assert L == pytest.approx(expected, rel=1e-13)


class TestGammaDerivatives:
    def test_worked_instance(self, worked):
        params, data = worked
        ws = forward_recursion(params, data)
        s = score_gamma(params, data, ws)
        np.testing.assert_allclose(ws.dW_dgamma[0, :, 0], [0, 0, 1])
        assert s[0] == pytest.approx(-E1, abs=1e-12)
        assert hessian_gamma(params, data, ws)[0, 0] == pytest.approx(-E1, abs=1e-12)

    def test_gamma_zero_collapses(self, rng):
        data = PanelData.from_array(rng.poisson(3, size=(2, 2, 7)))
        eta = rng.standard_normal((2, 7)) * 0.3
        params = GlarmaParams(eta, [0.0])
        ws = forward_recursion(params, data)
        Y, mu, E = data.counts, ws.mu, ws.E
        expected = np.sum((Y[:, 1:] - mu[:, 1:]) * E[:, :-1])
        assert score_gamma(params, data, ws)[0] == pytest.approx(expected, rel=1e-12)

    def test_all_zero_counts_gamma_zero(self):
        # every E is -1, so dW_t/dgamma = -1 for t >= 1; d2W_t = 0 at gamma = 0
        T = 5
        data = PanelData(np.zeros((2, T)), np.array([0, 0]))
        params = GlarmaParams(np.zeros((1, T)), [0.0])
        ws = forward_recursion(params, data)
        H = hessian_gamma(params, data, ws)
        d1 = np.array([0.0] + [-1.0] * (T - 1))
        d2 = np.zeros(T)
        for t in range(2, T):
            d2[t] = -2 * (1 + (-1.0)) * d1[t - 1]
        expected = 2 * (np.sum((0 - 1.0) * d2) - np.sum(d1 ** 2))
        assert H[0, 0] == pytest.approx(expected)

    def test_t1_vanishes(self, rng):
        data = PanelData.from_array(rng.poisson(3, size=(2, 3, 1)))
        params = GlarmaParams(np.zeros((2, 1)), [0.3, -0.1])
        np.testing.assert_array_equal(score_gamma(params, data), 0.0)
        np.testing.assert_array_equal(hessian_gamma(params, data), 0.0)

    def test_two_steps_hessian(self, rng):
        data = PanelData.from_array(rng.poisson(3, size=(1, 4, 2)))
        params = GlarmaParams(np.full((1, 2), 0.7), [0.4])
        ws = forward_recursion(params, data)
        H = hessian_gamma(params, data, ws)
        np.testing.assert_array_equal(ws.d2W_dgamma2, 0.0)
        expected = -np.sum(ws.mu * ws.dW_dgamma[..., 0] ** 2)
        assert H[0, 0] == pytest.approx(expected, rel=1e-14)


class TestEtaDerivatives:
    def test_worked_instance(self, worked):
        params, data = worked
        ws = forward_recursion(params, data)
        g = score_eta(params, data, ws)
        D = ws.dW_deta[0][0]
        assert D[1, 0] == -0.5
        assert D[2, 0] == 0.5
        assert g[0, 0] == pytest.approx(-0.5 - 0.5 * E1, abs=1e-12)
        D2 = eta_second_derivatives(params, data, 0, ws)
        assert D2[1, 0, 0] == 0.5

    def test_gamma_zero_is_glm(self, rng):
        data = PanelData.from_array(rng.poisson(3, size=(3, 2, 6)))
        eta = rng.standard_normal((3, 6)) * 0.2
        params = GlarmaParams(eta, [0.0, 0.0])
        g = score_eta(params, data)
        sums = np.stack([data.counts[data.rows(i)].sum(0) for i in range(3)])
        np.testing.assert_allclose(g, sums - 2 * np.exp(eta), rtol=1e-12)
        H = hessian_eta(params, data)
        np.testing.assert_allclose(H, np.diag(-2 * np.exp(eta).ravel()), rtol=1e-12, atol=0)

    def test_last_position_only_own_cell(self, rng):
        params, data = random_instance(rng, I=2, J=3, T=8, q=2)
        ws = forward_recursion(params, data)
        g = score_eta(params, data, ws)
        for i in range(2):
            r = data.rows(i)
            assert g[i, -1] == pytest.approx(np.sum(data.counts[r, -1] - ws.mu[r, -1]), rel=1e-12)

    def test_block_diagonal_exact(self, rng):
        params, data = random_instance(rng, I=3, J=2, T=6, q=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IndefiniteCurvatureWarning)
            H = hessian_eta(params, data)
        T = data.T
        for a in range(3):
            for b in range(3):
                if a != b:
                    assert np.all(H[a * T:(a + 1) * T, b * T:(b + 1) * T] == 0.0)
        np.testing.assert_array_equal(H, H.T)

    def test_adjoint_matches_materialized_tensor(self, rng):
        params, data = random_instance(rng, I=1, J=3, T=9, q=3)
        ws = forward_recursion(params, data)
        blocks = hessian_eta_blocks(params, data, ws)
        resid = data.counts - ws.mu
        H = np.zeros((9, 9))
        for s in range(3):
            D = ws.dW_deta[0][s]
            D2 = eta_second_derivatives(params, data, s, ws)
            H += np.einsum("t,tab->ab", resid[s], D2)
            H -= np.einsum("t,ta,tb->ab", ws.mu[s], D, D)
        np.testing.assert_allclose(blocks[0], H, rtol=1e-11, atol=1e-11)

    def test_indefinite_warning(self):
        # eta far from the data, strong feedback: the residual term dominates
        data = PanelData(np.array([[12, 8, 7, 5, 9]]), np.array([0]))
        params = GlarmaParams(np.array([[1.8, -1.3, -0.7, 0.9, 0.0]]), [0.8])
        with pytest.warns(IndefiniteCurvatureWarning):
            hessian_eta(params, data)


def _check_derivatives(params, data, tol1=1e-6, tol2=1e-4):
    gamma, eta = params.gamma, params.eta
    L_g = lambda g: log_likelihood(GlarmaParams(eta, g), data)
    L_e = lambda e: log_likelihood(GlarmaParams(e.reshape(eta.shape), gamma), data)
    s_g = lambda g: score_gamma(GlarmaParams(eta, g), data)
    s_e = lambda e: score_eta(GlarmaParams(e.reshape(eta.shape), gamma), data).ravel()
    errs = {}
    if params.q:
        errs["score_gamma"] = rel_err(score_gamma(params, data), central_difference(L_g, gamma))
        errs["hessian_gamma"] = rel_err(hessian_gamma(params, data),
                                        central_difference(s_g, gamma))
    errs["score_eta"] = rel_err(score_eta(params, data).ravel(),
                                central_difference(L_e, eta.ravel()))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IndefiniteCurvatureWarning)
        H = hessian_eta(params, data)
    errs["hessian_eta"] = rel_err(H, central_difference(s_e, eta.ravel()))
    limits = {"score_gamma": tol1, "score_eta": tol1, "hessian_gamma": tol2,
              "hessian_eta": tol2}
    return errs, all(errs[k] < limits[k] for k in errs)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_derivatives_match_finite_differences(seed):
    params, data = random_instance(np.random.default_rng(seed))
    errs, ok = _check_derivatives(params, data)
    assert ok, errs


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), q=st.integers(0, 3))
def test_structure_properties(seed, q):
    rng = np.random.default_rng(seed)
    params, data = random_instance(rng, q=q)
    ws = forward_recursion(params, data)
    score_gamma(params, data, ws)
    score_eta(params, data, ws)
    if params.q:
        np.testing.assert_array_equal(ws.dW_dgamma[:, 0], 0.0)
    for D in ws.dW_deta:
        assert np.all(np.triu(D, k=1) == 0.0)
        assert np.all(np.isfinite(D))
    assert np.all(np.isfinite(ws.d2W_dgamma2))
