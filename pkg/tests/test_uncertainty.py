import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from curvecast.density import DensityPrediction, NetworkConfig, cholesky_to_covariance, init_params
from curvecast.uncertainty import (
    EpistemicUndefinedError,
    aggregate,
    dropout_sample_predict,
)


def net(dropout=0.1, C=3, seed=0):
    cfg = NetworkConfig(contracts=C, window_len=4, common_layers=(16, 8), branch_layers=(8,),
                        covariance_mode="full", dropout_rate=dropout, seed=seed)
    return cfg, init_params(cfg)


def fake(mus, C=1):
    """Predictions with the given means and identity factors."""
    out = []
    for m in mus:
        m = np.atleast_2d(np.asarray(m, dtype=float))
        L = np.broadcast_to(np.eye(m.shape[1]), (len(m),) + (m.shape[1],) * 2).copy()
        out.append(DensityPrediction(m, L, cholesky_to_covariance(L)))
    return out


def two_pass_cov(mus):
    mus = np.asarray(mus)
    mean = mus.sum(axis=0) / len(mus)
    d = mus - mean
    return sum(np.outer(v, v) for v in d) / (len(mus) - 1)


def test_zero_dropout_samples_identical():
    cfg, p = net(dropout=0.0)
    x = np.random.default_rng(0).normal(size=(5, cfg.input_dim))
    samples = dropout_sample_predict(p, x, 4, seed=1)
    for s in samples[1:]:
        np.testing.assert_array_equal(s.mu, samples[0].mu)
    np.testing.assert_array_equal(aggregate(samples).sigma_E_hat, 0.0)


def test_same_seed_same_samples():
    cfg, p = net()
    x = np.random.default_rng(0).normal(size=(5, cfg.input_dim))
    a, b = dropout_sample_predict(p, x, 6, seed=3), dropout_sample_predict(p, x, 6, seed=3)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.mu, t.mu)


def test_prefix_of_samples_does_not_depend_on_count():
    cfg, p = net()
    x = np.random.default_rng(0).normal(size=(2, cfg.input_dim))
    short, long = dropout_sample_predict(p, x, 3, seed=3), dropout_sample_predict(p, x, 30, seed=3)
    for s, t in zip(short, long):
        np.testing.assert_array_equal(s.mu, t.mu)


def test_default_sample_count_is_thirty():
    cfg, p = net()
    assert len(dropout_sample_predict(p, np.zeros(cfg.input_dim), seed=0)) == 30


def test_identical_samples_zero_epistemic():
    est = aggregate(fake([[1.0, 2.0]] * 5))
    np.testing.assert_array_equal(est.sigma_E_hat, np.zeros((1, 2, 2)))


def test_two_sample_hand_case():
    est = aggregate(fake([[0.0], [2.0]]))
    assert est.mu_hat[0, 0] == 1.0
    assert est.sigma_E_hat[0, 0, 0] == ((0 - 1) ** 2 + (2 - 1) ** 2) / 1


def test_single_sample_rejected():
    with pytest.raises(EpistemicUndefinedError):
        aggregate(fake([[0.0]]))


def test_total_is_exact_sum():
    cfg, p = net()
    x = np.random.default_rng(0).normal(size=(7, cfg.input_dim))
    est = aggregate(dropout_sample_predict(p, x, 10, seed=2))
    np.testing.assert_array_equal(est.sigma_total, est.sigma_A_hat + est.sigma_E_hat)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(1, 4), st.integers(0, 2**31))
def test_epistemic_matches_two_pass_oracle(n, C, seed):
    rng = np.random.default_rng(seed)
    mus = rng.normal(size=(n, C)) * rng.uniform(0.01, 10)
    est = aggregate(fake([m[None] for m in mus]))
    np.testing.assert_allclose(est.sigma_E_hat[0], two_pass_cov(mus), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(est.sigma_E_hat[0], np.cov(mus.T, ddof=1).reshape(C, C), rtol=1e-10, atol=1e-12)


def test_epistemic_psd_and_symmetric():
    cfg, p = net(dropout=0.3)
    x = np.random.default_rng(0).normal(size=(20, cfg.input_dim))
    est = aggregate(dropout_sample_predict(p, x, 30, seed=5))
    np.testing.assert_array_equal(est.sigma_E_hat, np.swapaxes(est.sigma_E_hat, 1, 2))
    assert np.linalg.eigvalsh(est.sigma_E_hat).min() >= -1e-10


def test_small_spread_around_large_mean_is_stable():
    base = 1e8
    mus = base + np.array([0.0, 1e-4, 2e-4])
    est = aggregate(fake([[m] for m in mus]))
    assert est.sigma_E_hat[0, 0, 0] == pytest.approx(1e-8, rel=1e-4)


def test_epistemic_trace_shrinks_with_dropout_rate():
    x = np.random.default_rng(0).normal(size=(50, 12))
    traces = []
    for rate in (0.5, 0.2, 0.05, 0.0):
        cfg, p = net(dropout=rate, seed=1)
        est = aggregate(dropout_sample_predict(p, x, 30, seed=4))
        traces.append(np.trace(est.sigma_E_hat, axis1=1, axis2=2).mean())
    assert traces[-1] == 0.0
    assert all(b < a for a, b in zip(traces, traces[1:]))
