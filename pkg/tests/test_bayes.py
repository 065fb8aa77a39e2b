import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from curvecast.bayes import (
    BayesianMultiOutputRegressor,
    BayesPosterior,
    BayesPrior,
    VarianceUndefinedError,
    add_constant,
    fit,
    load_posterior,
    predictive,
    save_posterior,
)


def problem(n=200, p=20, C=3, seed=0, noise=0.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    B = rng.normal(size=(p + 1, C))
    Y = add_constant(X) @ B + noise * rng.normal(size=(n, C))
    return X, Y


def test_empty_fit_is_prior_state():
    prior = BayesPrior.default(3, 2)
    post = fit(np.zeros((0, 3)), np.zeros((0, 2)), prior)
    assert post.n == 0
    np.testing.assert_array_equal(post.gram, 0.0)
    np.testing.assert_array_equal(post.coef, prior.beta0)
    np.testing.assert_allclose(post.a_star, 0.0, atol=1e-12)


def test_two_sample_statistics_by_hand():
    D = np.array([[1.0, 1.0], [2.0, 1.0]])
    Y = np.array([[3.0], [5.0]])
    post = fit(D, Y, BayesPrior(np.zeros((2, 1)), np.eye(2), np.eye(1), 5.0))
    np.testing.assert_array_equal(post.gram, [[1 + 4, 1 + 2], [1 + 2, 1 + 1]])
    np.testing.assert_array_equal(post.cross, [[3 + 10], [3 + 5]])
    np.testing.assert_array_equal(post.yty, [[9 + 25]])


def test_prior_predictive_closed_form():
    beta0 = np.array([[0.5, -1.0], [2.0, 0.0], [1.0, 1.0]])
    prior = BayesPrior(beta0, 2.0 * np.eye(3), np.array([[1.0, 0.2], [0.2, 1.5]]), n0=10.0)
    post = BayesPosterior(prior)
    d = np.array([0.3, -0.7, 1.0])
    mean, var, dof = predictive(post, d)
    np.testing.assert_array_equal(mean, d @ beta0)
    np.testing.assert_array_equal(post.a_star, np.zeros((2, 2)))
    c_inv = 1.0 + d @ np.linalg.inv(np.linalg.inv(2.0 * np.eye(3))) @ d
    np.testing.assert_allclose(var, prior.omega * c_inv / (prior.nu0 - 2), rtol=1e-14)
    assert dof == prior.nu0


def test_flat_prior_matches_ols():
    X, Y = problem()
    D = add_constant(X)
    post = fit(D, Y, BayesPrior.default(21, 3, tau=1e10))
    beta_ols = np.linalg.solve(D.T @ D, D.T @ Y)
    Xt = np.random.default_rng(1).normal(size=(10, 20))
    mean, _, _ = predictive(post, add_constant(Xt))
    np.testing.assert_allclose(mean, add_constant(Xt) @ beta_ols, atol=1e-6)


def test_single_output_two_feature_dense_oracle():
    rng = np.random.default_rng(4)
    D = np.column_stack([rng.normal(size=6), np.ones(6)])
    Y = rng.normal(size=(6, 1))
    beta0 = np.array([[1.0], [1.0]])
    prior = BayesPrior(beta0, np.eye(2), np.eye(1), n0=6.0)
    post = fit(D, Y, prior)
    d = np.array([0.4, 1.0])
    mean, var, dof = predictive(post, d)

    S0i = np.eye(2)
    DtD = D.T @ D
    beta_hat = np.linalg.inv(DtD) @ D.T @ Y
    beta_post = np.linalg.inv(DtD + S0i) @ (DtD @ beta_hat + S0i @ beta0)
    a = DtD @ beta_hat + S0i @ beta0
    A = Y.T @ Y + beta0.T @ S0i @ beta0 - a.T @ np.linalg.inv(DtD + S0i) @ a
    # the textbook residual-plus-shrinkage form of the same quantity
    resid = Y - D @ beta_hat
    A_alt = resid.T @ resid + (beta_hat - beta0).T @ np.linalg.inv(np.linalg.inv(DtD) + np.eye(2)) @ (beta_hat - beta0)
    nu0 = 6.0 - (1 + 2) + 1
    c_inv = 1.0 + d @ np.linalg.inv(DtD + S0i) @ d
    expected_var = (np.eye(1) + A) * c_inv / (6 + nu0 - 2)

    np.testing.assert_allclose(A, A_alt, rtol=1e-10)
    np.testing.assert_allclose(post.a_star, A, rtol=1e-10)
    np.testing.assert_allclose(mean, d @ beta_post, rtol=1e-12)
    np.testing.assert_allclose(var, expected_var, rtol=1e-12)
    assert dof == 6 + nu0


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 1500), min_size=1, max_size=5), st.integers(0, 1000))
def test_incremental_fit_is_bit_exact(chunks, seed):
    n = sum(chunks)
    X, Y = problem(n=n, p=4, C=2, seed=seed)
    D = add_constant(X)
    prior = BayesPrior.default(5, 2)
    batch = fit(D, Y, prior)
    post = BayesPosterior(prior)
    lo = 0
    for k in chunks:
        post = fit(D[lo:lo + k], Y[lo:lo + k], posterior=post)
        lo += k
    for name in ("gram", "cross", "yty"):
        np.testing.assert_array_equal(getattr(post, name), getattr(batch, name))
    if n:
        d = D[:3]
        for a, b in zip(predictive(post, d), predictive(batch, d)):
            np.testing.assert_array_equal(a, b)


def test_predictive_variance_pd_and_leverage_at_least_one():
    X, Y = problem(n=50, p=5)
    est = BayesianMultiOutputRegressor().fit(X, Y)
    D = add_constant(np.random.default_rng(2).normal(size=(30, 5)))
    assert np.all(est.posterior_.leverage(D) >= 1.0)
    _, var, _ = predictive(est.posterior_, D)
    np.testing.assert_allclose(var, np.swapaxes(var, 1, 2))
    assert np.linalg.eigvalsh(var).min() > 0


def test_predictive_mean_affine_in_prior_mean():
    X, Y = problem(n=30, p=3, C=2)
    D = add_constant(X)
    d = D[:4]
    b1, b2 = np.ones((4, 2)), -2.0 * np.arange(8.0).reshape(4, 2)
    means = [predictive(fit(D, Y, BayesPrior(b, np.eye(4), np.eye(2), 10.0)), d)[0] for b in (b1, b2, 0.3 * b1 + 0.7 * b2)]
    np.testing.assert_allclose(means[2], 0.3 * means[0] + 0.7 * means[1], rtol=1e-10, atol=1e-12)


def test_prior_dof_guard():
    with pytest.raises(ValueError, match="nu0"):
        BayesPrior(np.zeros((2, 3)), np.eye(2), np.eye(3), n0=5.0)


def test_variance_undefined_when_dof_small():
    prior = BayesPrior(np.zeros((1, 1)), np.eye(1), np.eye(1), n0=3.5)  # nu0 = 2.5
    post = BayesPosterior(prior)
    post.prior.__dict__["n0"] = 2.5  # nu0 = 1.5 after construction-time validation
    with pytest.raises(VarianceUndefinedError):
        predictive(post, np.ones(1))


def test_default_prior_dof():
    prior = BayesPrior.default(901, 9)
    assert prior.nu0 == 9 + 3


def test_posterior_round_trip(tmp_path):
    X, Y = problem(n=1500, p=4)
    post = fit(add_constant(X), Y)
    save_posterior(tmp_path / "b.npz", post)
    back = load_posterior(tmp_path / "b.npz")
    d = add_constant(X[:5])
    for a, b in zip(predictive(post, d), predictive(back, d)):
        np.testing.assert_array_equal(a, b)


def test_estimator_interface():
    X, Y = problem(n=100, p=6)
    est = BayesianMultiOutputRegressor(tau=10.0)
    assert clone(est).get_params()["tau"] == 10.0
    est.fit(X, Y)
    assert est.predict(X).shape == (100, 3)
    unc = est.predict_uncertainty(X[:7])
    np.testing.assert_allclose(unc.sigma_total, predictive(est.posterior_, add_constant(X[:7]))[1], rtol=1e-12)
    assert np.all(np.linalg.eigvalsh(unc.sigma_E_hat) >= 0)
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 5)))


def test_partial_fit_equals_fit():
    X, Y = problem(n=2100, p=3)
    a = BayesianMultiOutputRegressor().fit(X, Y)
    b = BayesianMultiOutputRegressor()
    for lo in range(0, 2100, 700):
        b.partial_fit(X[lo:lo + 700], Y[lo:lo + 700])
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
