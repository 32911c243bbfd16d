import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from drlearn.estimator import (DegenerateHistory, History, InsufficientSamples, MomentEstimate,
                               SensitivityEstimate, diagnostics, empirical_moments, fit_all,
                               fit_lse, psd_floor, residuals, write_snapshot)


def normal_equations(lam, x):
    """Independent least squares on the design [2 lambda, 1]."""
    D = np.column_stack([2 * np.asarray(lam), np.ones(len(lam))])
    b1, b0 = np.linalg.lstsq(D, np.asarray(x), rcond=None)[0]
    return b0, b1


def test_fit_examples():
    b0, b1 = fit_lse([10, 20, 30], [0.4, 0.8, 1.2])
    assert b1 == pytest.approx(0.02, abs=1e-12) and b0 == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegenerateHistory):
        fit_lse([5, 5, 5], [1, 2, 3])
    with pytest.raises(DegenerateHistory):
        fit_lse([5], [1])


@settings(max_examples=200)
@given(st.lists(st.floats(0, 300), min_size=3, max_size=40),
       st.floats(-5, 5), st.floats(1e-4, 1.0), st.integers(0, 2**31))
def test_fit_matches_lstsq_oracle(lam, b0, b1, seed):
    lam = np.array(lam)
    assume(np.ptp(lam) > 1e-3)
    x = 2 * b1 * lam + b0 + np.random.default_rng(seed).normal(0, 0.1, lam.size)
    got = fit_lse(lam, x)
    want = normal_equations(lam, x)
    np.testing.assert_allclose(got, want, rtol=1e-7, atol=1e-9)
    est = SensitivityEstimate(np.array([got[0]]), np.array([got[1]]), lam.size)
    assert abs(residuals(lam[:, None], x[:, None], est).mean()) < 1e-9


def test_residual_examples():
    lam, x = np.array([10.0, 20, 30]), np.array([0.5, 0.8, 1.1])
    b0, b1 = fit_lse(lam, x)
    est = SensitivityEstimate(np.array([b0]), np.array([b1]), 3)
    assert abs(residuals(lam[:, None], x[:, None], est).mean()) < 1e-12
    # exact estimate leaves the injected noise as residual
    eps = np.array([0.1, -0.2, 0.05])
    truth = SensitivityEstimate(np.array([0.3]), np.array([0.01]), 3)
    r = residuals(lam[:, None], (truth.expected(lam) + eps)[:, None], truth)
    np.testing.assert_allclose(r[:, 0], eps, atol=1e-15)


def test_moments_examples():
    mom = empirical_moments(np.array([[1.0], [-1.0]]))
    assert mom.mu_hat[0] == 0 and mom.sigma_hat[0, 0] == 2
    np.testing.assert_array_equal(mom.omega_hat, [[2, 0], [0, 1]])
    mom = empirical_moments(np.full((5, 2), 0.7))
    np.testing.assert_allclose(mom.mu_hat, 0.7)
    np.testing.assert_allclose(mom.sigma_hat, 0.0, atol=1e-15)
    with pytest.raises(InsufficientSamples):
        empirical_moments(np.ones((1, 3)))


@settings(max_examples=50)
@given(st.integers(2, 30), st.integers(1, 6), st.integers(0, 2**31))
def test_moment_matrix_blocks(k, m, seed):
    E = np.random.default_rng(seed).normal(size=(k, m))
    mom = empirical_moments(E)
    om = mom.omega_hat
    np.testing.assert_allclose(om[:m, :m], mom.sigma_hat + np.outer(mom.mu_hat, mom.mu_hat))
    np.testing.assert_allclose(om[:m, m], mom.mu_hat)
    assert om[m, m] == 1
    np.testing.assert_allclose(mom.sigma_hat, np.cov(E.T, ddof=1).reshape(m, m), atol=1e-12)
    assert np.linalg.eigvalsh(mom.sigma_hat).min() >= -1e-12


def test_psd_floor_clips_negative_eigenvalues():
    S = np.array([[1.0, 2.0], [2.0, 1.0]])
    F = psd_floor(S)
    assert np.linalg.eigvalsh(F).min() >= -1e-12
    np.testing.assert_allclose(F, [[1.5, 1.5], [1.5, 1.5]])


def test_diagnostics_examples():
    d = diagnostics([1.0, 2.0])
    np.testing.assert_array_equal(d.fisher, [[5, 3], [3, 2]])
    assert d.price_spread == 0.5
    d = diagnostics([10.0, 20, 30], 2 * 0.01 * np.array([10.0, 20, 30]) + 0.1, truth=(0.1, 0.01))
    np.testing.assert_allclose(d.error, 0, atol=1e-14)
    flat = [diagnostics([50.0] * k).fisher_min_eig for k in (2, 10, 100)]
    assert max(flat) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 200), min_size=3, max_size=30), st.integers(0, 2**31))
def test_diagnostic_error_equals_fit_error(lam, seed):
    lam = np.array(lam)
    assume(np.ptp(lam) > 1e-2)
    x = 2 * 0.02 * lam - 0.3 + np.random.default_rng(seed).normal(0, 0.2, lam.size)
    b0, b1 = fit_lse(lam, x)
    d = diagnostics(lam, x, truth=(-0.3, 0.02))
    np.testing.assert_allclose(d.error, [b1 - 0.02, b0 + 0.3], atol=1e-9)
    assert d.price_spread == pytest.approx(np.var(lam) * lam.size)
    assert np.linalg.eigvalsh(d.fisher).min() > -1e-9


@given(st.lists(st.floats(0, 200), min_size=2, max_size=30))
def test_spread_non_decreasing(lam):
    spreads = [diagnostics(lam[:k]).price_spread for k in range(2, len(lam) + 1)]
    assert all(b >= a - 1e-7 * max(1, a) for a, b in zip(spreads, spreads[1:]))


def test_estimation_error_shrinks():
    err50, err500 = [], []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        lam = rng.uniform(30, 200, 500)
        x = 2 * (1 / 150) * lam + rng.normal(0, 0.3, 500)
        err50.append(abs(fit_lse(lam[:50], x[:50])[1] - 1 / 150))
        err500.append(abs(fit_lse(lam, x)[1] - 1 / 150))
    assert np.median(err500) < np.median(err50)


def test_covariance_converges():
    cov = np.diag([0.04, 0.09])
    d50, d500 = [], []
    for seed in range(30):
        rng = np.random.default_rng(seed)
        lam = rng.uniform(30, 200, (500, 2))
        x = 2 * 0.01 * lam + rng.multivariate_normal(np.zeros(2), cov, 500)
        for k, out in ((50, d50), (500, d500)):
            h = History(2)
            for t in range(k):
                h.append(t + 1, lam[t], x[t])
            est, _ = fit_all(h, SensitivityEstimate(np.zeros(2), np.full(2, 0.005), 0))
            mom = empirical_moments(residuals(h.prices, h.responses, est))
            out.append(np.linalg.norm(mom.sigma_hat - cov))
    assert np.median(d500) < np.median(d50)


def test_history_and_fit_all():
    h = History(2)
    h.append(1, [10.0, 5.0], [0.2, 1.0])
    with pytest.raises(ValueError):
        h.append(1, [10.0, 5.0], [0.2, 1.0])
    with pytest.raises(ValueError):
        h.append(2, [1.0], [1.0])
    h.append(2, [20.0, 5.0], [0.4, 1.0])
    prior = SensitivityEstimate(np.array([9.0, 9.0]), np.array([8.0, 8.0]), 0)
    est, fitted = fit_all(h, prior)
    assert fitted.tolist() == [True, False]
    assert est.beta1_hat[0] == pytest.approx(0.01) and est.beta1_hat[1] == 8.0


def test_forgetting_weights_recent_data():
    lam = np.array([10.0, 20, 30, 40])
    x = np.array([0.0, 0.0, 1.0, 2.0])
    assert fit_lse(lam, x, forgetting=0.5)[1] > fit_lse(lam, x)[1]
    with pytest.raises(ValueError):
        fit_lse(lam, x, forgetting=1.5)


def test_moment_estimate_zero_mean():
    mom = MomentEstimate.zero_mean(np.eye(3))
    assert mom.mu_hat.tolist() == [0, 0, 0]


def test_snapshot_csv(tmp_path):
    write_snapshot([(1, 0, 0.0, 0.005, 0.0, 0.01)], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text() == (
        "t,node,beta0_hat,beta1_hat,residual_mean,residual_var\n1,0,0.0,0.005,0.0,0.01\n")
