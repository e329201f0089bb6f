"""Tests for the Gaussian belief algebra.

The filtering recursion is checked against a brute-force oracle that builds
the joint Gaussian over (x_1..T, y_1..T) and conditions it directly; mixture
collapse is checked against an independently coded weighted-moment oracle.
"""

import numpy as np
import pytest

from sldsmon.gaussian import (
    GaussianBelief,
    RegimeParams,
    WeightedGaussianMixture,
    gaussian_loglik,
    kalman_predict,
    kalman_update,
    moment_match_collapse,
    stationary_cov,
    symmetrize,
)


def random_psd(rng, d, scale=1.0):
    m = rng.standard_normal((d, d))
    return symmetrize(m @ m.T * scale / d + 0.1 * scale * np.eye(d))


def random_stable_lds(rng, dx, dy):
    A = rng.standard_normal((dx, dx))
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    A *= 0.9 / max(rho, 1e-6)
    Q = random_psd(rng, dx)
    C = rng.standard_normal((dy, dx))
    R = random_psd(rng, dy)
    m0 = rng.standard_normal(dx)
    P0 = random_psd(rng, dx)
    return A, Q, C, R, m0, P0


def simulate_lds(rng, A, Q, C, R, m0, P0, T):
    x = rng.multivariate_normal(m0, P0)
    ys = []
    for _ in range(T):
        ys.append(rng.multivariate_normal(C @ x, R))
        x = rng.multivariate_normal(A @ x, Q)
    return np.array(ys)


def joint_conditioning_oracle(A, Q, C, R, m0, P0, ys):
    """Filtered moments of x_t given y_1..t from the explicit joint Gaussian.

    x_1 ~ N(m0, P0); the convention matches a filter that updates with y_1
    before the first prediction.
    """
    T, dy = ys.shape
    dx = A.shape[0]
    mx = np.zeros((T, dx))
    Sxx = np.zeros((T, T, dx, dx))
    mx[0] = m0
    Sxx[0, 0] = P0
    for t in range(1, T):
        mx[t] = A @ mx[t - 1]
        for s in range(t):
            Sxx[t, s] = A @ Sxx[t - 1, s]
            Sxx[s, t] = Sxx[t, s].T
        Sxx[t, t] = A @ Sxx[t - 1, t - 1] @ A.T + Q

    my = np.concatenate([C @ mx[t] for t in range(T)])
    Syy = np.zeros((T * dy, T * dy))
    for t in range(T):
        for s in range(T):
            block = C @ Sxx[t, s] @ C.T
            if t == s:
                block = block + R
            Syy[t * dy:(t + 1) * dy, s * dy:(s + 1) * dy] = block

    out = []
    yflat = ys.reshape(-1)
    for t in range(T):
        k = (t + 1) * dy
        Sxy = np.concatenate([Sxx[t, s] @ C.T for s in range(t + 1)], axis=1)
        Syy_t = Syy[:k, :k]
        gain = np.linalg.solve(Syy_t, Sxy.T).T
        mean = mx[t] + gain @ (yflat[:k] - my[:k])
        cov = Sxx[t, t] - gain @ Sxy.T
        out.append((mean, symmetrize(cov)))
    return out


def run_filter(A, Q, C, R, m0, P0, ys):
    belief = GaussianBelief(m0, P0)
    history = []
    for t, y in enumerate(ys):
        if t > 0:
            belief = kalman_predict(belief, A, Q)
        belief = kalman_update(belief, y, C, R)
        history.append(belief)
    return history


def max_rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / scale


class TestKalmanPredict:
    def test_identity_no_noise_is_identity(self):
        rng = np.random.default_rng(0)
        belief = GaussianBelief(rng.standard_normal(3), random_psd(rng, 3))
        out = kalman_predict(belief, np.eye(3), np.zeros((3, 3)))
        np.testing.assert_allclose(out.mean, belief.mean)
        np.testing.assert_allclose(out.cov, belief.cov)

    def test_scalar_arithmetic(self):
        out = kalman_predict(GaussianBelief([1.0], [[1.0]]), [[2.0]], [[1.0]])
        np.testing.assert_allclose(out.mean, [2.0])
        np.testing.assert_allclose(out.cov, [[5.0]])

    def test_companion_propagation_stays_psd(self):
        # AR(2) companion embedded in a 3-dim lag block.
        A = np.array([[0.5, -0.3, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        Q = np.zeros((3, 3))
        Q[0, 0] = 0.7
        rng = np.random.default_rng(1)
        for _ in range(25):
            belief = GaussianBelief(rng.standard_normal(3), random_psd(rng, 3))
            out = kalman_predict(belief, A, Q)
            assert np.max(np.abs(out.cov - out.cov.T)) <= 1e-10
            assert np.linalg.eigvalsh(out.cov).min() >= -1e-9

    def test_dimension_mismatch_raises(self):
        belief = GaussianBelief([0.0, 0.0], np.eye(2))
        with pytest.raises(ValueError):
            kalman_predict(belief, np.eye(3), np.eye(3))

    def test_nonfinite_result_raises(self):
        belief = GaussianBelief([1.0], [[1.0]])
        with pytest.raises(ValueError):
            kalman_predict(belief, [[np.inf]], [[1.0]])


class TestKalmanUpdate:
    def test_empty_observation_returns_input(self):
        belief = GaussianBelief([1.0, -1.0], np.eye(2))
        out = kalman_update(belief, [np.nan, np.nan], np.eye(2), np.eye(2))
        assert out is belief

    def test_severed_rows_return_input(self):
        belief = GaussianBelief([1.0], [[2.0]])
        out = kalman_update(belief, [5.0], [[0.0]], [[1.0]])
        assert out is belief

    def test_scalar_conjugate_update(self):
        out = kalman_update(GaussianBelief([0.0], [[1.0]]), [1.0], [[1.0]], [[1.0]])
        np.testing.assert_allclose(out.mean, [0.5], atol=1e-12)
        np.testing.assert_allclose(out.cov, [[0.5]], atol=1e-9)

    def test_uninformative_measurement_keeps_prior(self):
        belief = GaussianBelief([0.3], [[1.5]])
        out = kalman_update(belief, [10.0], [[1.0]], [[1e12]])
        np.testing.assert_allclose(out.mean, belief.mean, atol=1e-6)
        np.testing.assert_allclose(out.cov, belief.cov, atol=1e-6)

    def test_posterior_variance_never_grows(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            belief = GaussianBelief(rng.standard_normal(3), random_psd(rng, 3))
            C = rng.standard_normal((2, 3))
            R = random_psd(rng, 2)
            out = kalman_update(belief, rng.standard_normal(2), C, R)
            # prior - posterior must be PSD in the observed subspace
            diff = belief.cov - out.cov
            assert np.linalg.eigvalsh(symmetrize(diff)).min() >= -1e-8

    def test_partial_nan_drops_that_row_only(self):
        rng = np.random.default_rng(3)
        belief = GaussianBelief(rng.standard_normal(2), random_psd(rng, 2))
        C = np.eye(2)
        R = np.eye(2)
        y = np.array([0.7, np.nan])
        got = kalman_update(belief, y, C, R)
        want = kalman_update(belief, np.array([0.7]), C[:1], R[:1, :1])
        np.testing.assert_allclose(got.mean, want.mean, atol=1e-12)
        np.testing.assert_allclose(got.cov, want.cov, atol=1e-12)


class TestGaussianLoglik:
    def test_zero_residual_scalar(self):
        belief = GaussianBelief([2.0], [[0.5]])
        v = 0.5 + 1.0  # predictive variance
        got = gaussian_loglik(belief, [2.0], [[1.0]], [[1.0]])
        assert got == pytest.approx(-0.5 * np.log(2 * np.pi * v), rel=0, abs=1e-8)

    def test_scalar_reference_value(self):
        got = gaussian_loglik(GaussianBelief([0.0], [[1.0]]), [2.0], [[1.0]], [[1.0]])
        assert got == pytest.approx(-0.5 * np.log(4 * np.pi) - 1.0, abs=1e-9)

    def test_monotone_in_residual(self):
        belief = GaussianBelief([0.0], [[1.0]])
        lls = [
            gaussian_loglik(belief, [r], [[1.0]], [[1.0]])
            for r in (0.0, 0.5, 1.0, 2.0, 5.0)
        ]
        assert all(a > b for a, b in zip(lls, lls[1:]))

    def test_all_missing_raises(self):
        belief = GaussianBelief([0.0], [[1.0]])
        with pytest.raises(ValueError):
            gaussian_loglik(belief, [np.nan], [[1.0]], [[1.0]])

    def test_severed_row_scores_against_noise_only(self):
        belief = GaussianBelief([3.0], [[2.0]])
        got = gaussian_loglik(belief, [1.5], [[0.0]], [[4.0]])
        want = -0.5 * (np.log(2 * np.pi * 4.0) + 1.5**2 / 4.0)
        assert got == pytest.approx(want, abs=1e-6)


def collapse_oracle(weights, means, covs):
    """Mixture moments via E[x x^T] - m m^T (independent algebraic route)."""
    w = np.asarray(weights)
    means = np.asarray(means)
    mean = np.einsum("i,ij->j", w, means)
    second = np.zeros((mean.size, mean.size))
    for wi, mi, ci in zip(w, means, covs):
        second += wi * (ci + np.outer(mi, mi))
    return mean, second - np.outer(mean, mean)


class TestMomentMatchCollapse:
    def test_identical_components(self):
        b = GaussianBelief([1.0, 2.0], np.diag([0.5, 1.5]))
        mix = WeightedGaussianMixture([0.3, 0.7], (b, b))
        out = moment_match_collapse(mix)
        np.testing.assert_allclose(out.mean, b.mean, atol=1e-14)
        np.testing.assert_allclose(out.cov, b.cov, atol=1e-14)

    def test_two_scalar_components(self):
        mix = WeightedGaussianMixture(
            [0.5, 0.5],
            (GaussianBelief([-1.0], [[1.0]]), GaussianBelief([1.0], [[1.0]])),
        )
        out = moment_match_collapse(mix)
        np.testing.assert_allclose(out.mean, [0.0], atol=1e-14)
        np.testing.assert_allclose(out.cov, [[2.0]], atol=1e-14)

    def test_zero_weight_component_dropped(self):
        a = GaussianBelief([1.0], [[1.0]])
        b = GaussianBelief([100.0], [[50.0]])
        out = moment_match_collapse(WeightedGaussianMixture([1.0, 0.0], (a, b)))
        np.testing.assert_allclose(out.mean, a.mean)
        np.testing.assert_allclose(out.cov, a.cov)

    def test_matches_weighted_moment_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            k = rng.integers(1, 6)
            d = rng.integers(1, 5)
            w = rng.random(k) + 1e-3
            w /= w.sum()
            beliefs = tuple(
                GaussianBelief(rng.standard_normal(d), random_psd(rng, d))
                for _ in range(k)
            )
            out = moment_match_collapse(WeightedGaussianMixture(w, beliefs))
            mean, cov = collapse_oracle(w, [b.mean for b in beliefs], [b.cov for b in beliefs])
            assert np.max(np.abs(out.mean - mean)) <= 1e-12
            assert np.max(np.abs(out.cov - cov)) <= 1e-12

    def test_mixture_invariants_enforced(self):
        b = GaussianBelief([0.0], [[1.0]])
        with pytest.raises(ValueError):
            WeightedGaussianMixture([0.5, 0.4], (b, b))
        with pytest.raises(ValueError):
            WeightedGaussianMixture([], ())


class TestFilterAgainstJointOracle:
    def test_recursive_filter_matches_direct_conditioning(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            dx = int(rng.integers(1, 5))
            dy = int(rng.integers(1, min(dx, 2) + 1))
            A, Q, C, R, m0, P0 = random_stable_lds(rng, dx, dy)
            ys = simulate_lds(rng, A, Q, C, R, m0, P0, T=20)
            filt = run_filter(A, Q, C, R, m0, P0, ys)
            oracle = joint_conditioning_oracle(A, Q, C, R, m0, P0, ys)
            for (got, (mean, cov)) in zip(filt, oracle):
                assert max_rel_err(got.mean, mean) <= 1e-8
                assert max_rel_err(got.cov, cov) <= 1e-8


class TestTypesAndHelpers:
    def test_belief_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            GaussianBelief([0.0, 1.0], np.eye(3))

    def test_belief_validate_flags_asymmetry(self):
        b = GaussianBelief([0.0, 0.0], np.eye(2))
        object.__setattr__(b, "cov", np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(ValueError):
            b.validate()

    def test_regime_params_consistency(self):
        with pytest.raises(ValueError):
            RegimeParams(np.eye(2), np.eye(2), np.eye(3), np.eye(3))
        p = RegimeParams(np.eye(2), np.eye(2), np.array([[1.0, 0.0]]), [[0.5]])
        assert p.has_binary_c()
        assert p.state_dim == 2 and p.obs_dim == 1

    def test_stationary_cov_solves_fixed_point(self):
        rng = np.random.default_rng(5)
        A = np.array([[0.5, -0.3, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        Q = np.zeros((3, 3))
        Q[0, 0] = 1.3
        P = stationary_cov(A, Q)
        np.testing.assert_allclose(P, A @ P @ A.T + Q, atol=1e-10)
        assert np.linalg.eigvalsh(P).min() > 0

    def test_stationary_cov_rejects_unit_root(self):
        with pytest.raises(ValueError):
            stationary_cov([[1.0]], [[1.0]])

    def test_beliefs_are_immutable(self):
        b = GaussianBelief([0.0], [[1.0]])
        with pytest.raises((ValueError, RuntimeError)):
            b.mean[0] = 5.0
