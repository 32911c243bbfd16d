import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drlearn.participants import (NoiseSpec, ParticipantTruth, case_study_truths,
                                  expected_response, from_cost_params, load_participants,
                                  realized_demand, recovered_response, respond,
                                  write_participants)


def test_from_cost_params_examples():
    assert from_cost_params(0.0, 75.0) == (0.0, 1.0 / 150.0)
    assert from_cost_params(0.5, 1.0) == (-0.5, 0.5)
    b0, b1 = from_cost_params(0.5, 1.0)
    assert (10 - 0.5) / 1.0 == 2 * b1 * 10 + b0
    with pytest.raises(ValueError):
        from_cost_params(0.0, 0.0)


@given(st.floats(-50, 50), st.floats(0.01, 500), st.floats(0, 300))
def test_profit_maximising_response_matches_linear_model(nu0, nu1, lam):
    b0, b1 = from_cost_params(nu0, nu1)
    assert 2 * b1 * lam + b0 == pytest.approx((lam - nu0) / nu1, rel=1e-12, abs=1e-12)


def test_expected_response_examples():
    assert expected_response(ParticipantTruth(1, 0.0, 1 / 150, 0), 75) == pytest.approx(1.0)
    assert expected_response(ParticipantTruth(1, 0.0, 0.3, 0), 0) == 0
    assert expected_response(ParticipantTruth(1, -0.5, 0.5, 0), 2) == 1.5


def test_truth_invariants():
    with pytest.raises(ValueError):
        ParticipantTruth(1, 0.0, -0.1, 0.0)
    with pytest.raises(ValueError):
        ParticipantTruth(1, 0.0, 0.1, -1.0)


def test_noiseless_response_is_exact():
    t = [ParticipantTruth(0, 0.0, 1 / 150, 0.0)]
    x, eps = respond(t, [75.0], NoiseSpec(np.zeros((1, 1))), np.random.default_rng(0))
    assert x[0] == pytest.approx(1.0) and eps[0] == 0


def test_response_is_reproducible():
    truths = case_study_truths(np.array([0, 1.0, 2.0]))
    noise = NoiseSpec(np.diag([0, 0.01, 0.04]))
    a = respond(truths, [0, 50, 60], noise, np.random.default_rng(7))[0]
    b = respond(truths, [0, 50, 60], noise, np.random.default_rng(7))[0]
    assert np.array_equal(a, b)


def test_respond_rejects_negative_price():
    with pytest.raises(ValueError):
        respond([ParticipantTruth(0, 0, 0.1, 0)], [-1.0], NoiseSpec(np.zeros((1, 1))),
                np.random.default_rng(0))


@pytest.mark.parametrize("family", ["gaussian", "uniform", "two_point"])
def test_noise_moments(family):
    cov = np.array([[0.01, 0.004], [0.004, 0.02]])
    eps = NoiseSpec(cov, family=family).sample(np.random.default_rng(3), 100_000)
    assert np.abs(eps.mean(0)).max() < 4 * np.sqrt(0.02 / 100_000)
    np.testing.assert_allclose(np.cov(eps.T), cov, rtol=0.05, atol=5e-4)


def test_gaussian_variance_within_five_percent():
    eps = NoiseSpec(np.array([[0.01]])).sample(np.random.default_rng(11), 100_000)
    assert abs(eps.var() / 0.01 - 1) < 0.05


def test_extremal_two_point_law():
    cov = np.diag([1.0, 2.0, 0.5])
    a = np.array([1.0, -1.0, 2.0])
    eta = 0.1
    noise = NoiseSpec(cov, family="two_point", direction=a, eta=eta)
    eps = noise.sample(np.random.default_rng(5), 200_000)
    proj = eps @ a
    hi = np.sqrt(a @ cov @ a * (1 - eta) / eta)
    assert set(np.round(np.unique(np.round(proj, 9)), 6)) == {round(hi, 6),
                                                             round(-hi * eta / (1 - eta), 6)}
    assert abs(np.mean(np.isclose(proj, hi)) - eta) < 4 * np.sqrt(eta * (1 - eta) / 200_000)
    np.testing.assert_allclose(np.cov(eps.T), cov, rtol=0.03, atol=0.01)


def test_price_independent_variance():
    truths = [ParticipantTruth(0, 0.0, 0.01, 0.1)]
    noise = NoiseSpec(np.array([[0.01]]))
    rng = np.random.default_rng(1)
    lo = np.array([respond(truths, [10.0], noise, rng)[0][0] for _ in range(20_000)])
    hi = np.array([respond(truths, [100.0], noise, rng)[0][0] for _ in range(20_000)])
    assert abs(lo.mean() - 0.2) < 3 * 0.1 / np.sqrt(20_000)
    assert abs(hi.mean() - 2.0) < 3 * 0.1 / np.sqrt(20_000)
    assert abs(lo.var() / hi.var() - 1) < 0.05


def test_noise_spec_rejects_bad_covariance():
    with pytest.raises(ValueError, match="PSD"):
        NoiseSpec(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError, match="symmetric"):
        NoiseSpec(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="family"):
        NoiseSpec(np.eye(2), family="cauchy")


def test_realized_demand_examples():
    assert realized_demand(2.0, 1.0, 0.0) == 1.0
    assert recovered_response(2.0, 1.0) == 1.0
    assert realized_demand(2.0, 1.0, 0.1) == pytest.approx(0.9)
    assert recovered_response(2.0, realized_demand(2.0, 1.0, 0.1)) == pytest.approx(1.1)
    assert realized_demand(2.0, 0.0, 0.0) == 2.0


@given(st.floats(0, 100), st.floats(-10, 10), st.floats(-1, 1))
def test_round_trip_identity(d, x, e):
    assert recovered_response(d, realized_demand(d, x, e)) == pytest.approx(x + e, abs=1e-12)


def test_participants_file_round_trip(tmp_path):
    truths = case_study_truths(np.array([0.0, 1.0, 2.0]))
    write_participants(truths, tmp_path / "participants.csv")
    back, cov = load_participants(tmp_path / "participants.csv", 3)
    assert back == truths
    np.testing.assert_allclose(np.diag(cov), [0, 0.01, 0.04])


def test_covariance_file_checked(tmp_path):
    write_participants(case_study_truths(np.array([0.0, 1.0, 2.0])), tmp_path / "participants.csv")
    np.savetxt(tmp_path / "covariance.csv", np.diag([0, 0.01, 0.05]), delimiter=",")
    with pytest.raises(ValueError, match="diagonal"):
        load_participants(tmp_path, 3)
    np.savetxt(tmp_path / "covariance.csv",
               np.array([[0, 0, 0], [0, 0.01, 0.015], [0, 0.015, 0.04]]), delimiter=",")
    _, cov = load_participants(tmp_path, 3)
    assert cov[1, 2] == 0.015
