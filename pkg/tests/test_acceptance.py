"""Acceptance criteria, one test each; a pass/fail line per criterion is printed at the end."""
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
import yaml

import curvecast.density as dn
from curvecast import cli
from curvecast.backtest import (
    PredictionSet,
    StrategySpec,
    alpha_optimality_check,
    portfolio_sharpe,
    run_backtest,
)
from curvecast.bayes import BayesPosterior, BayesPrior, add_constant, fit, predictive
from curvecast.benchmark import BENCHMARK_SEEDS, benchmark_summary
from curvecast.density import DensityPrediction, NetworkConfig, cholesky_to_covariance, init_params, mvn_nll
from curvecast.market_data import MicropriceSeries
from curvecast.sampling import (
    align_and_downsample,
    build_windows,
    denormalize_prediction,
    make_dataset,
    normalize_window,
)
from curvecast.uncertainty import aggregate, dropout_sample_predict

from helpers import dense_mvn_logpdf, finite_difference_check, synthetic_series

RESULTS: dict[int, tuple[bool, str]] = {}
TITLES = {
    1: "gradient correctness",
    2: "loss/density oracle",
    3: "covariance structure",
    4: "epistemic estimator identity",
    5: "bayesian baseline",
    6: "alpha optimality",
    7: "sampler guarantees",
    8: "backtest accounting",
    9: "directional synthetic reproduction",
    10: "threshold sweep monotonicity",
    11: "determinism",
}


@pytest.fixture(scope="module", autouse=True)
def report_lines(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    lines = [f"criterion {k:2d} {TITLES[k]:<36s} {'PASS' if ok else 'FAIL'}  {detail}"
             for k, (ok, detail) in sorted(RESULTS.items())]
    if tr is not None:
        tr.write_line("")
        tr.write_line("acceptance summary")
        for ln in lines:
            tr.write_line(ln)
    else:
        print("\n".join(lines))


def record(k: int, ok: bool, detail: str):
    RESULTS[k] = (bool(ok), detail)
    assert ok, f"criterion {k} ({TITLES[k]}) failed: {detail}"


# ---- 1 ----------------------------------------------------------------------


def test_criterion_01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rels = []
    for mode in ("diagonal", "full"):
        cfg = NetworkConfig(contracts=3, window_len=10, common_layers=(16, 8), branch_layers=(8,),
                            covariance_mode=mode, dropout_rate=0.1, l2_lambda=1e-3, seed=1)
        assert cfg.input_dim == 30
        p = init_params(cfg)
        rng = np.random.default_rng(17)
        # random biases keep pre-activations away from the ReLU kink
        for k in p.arrays:
            if k.endswith(".b"):
                p.arrays[k] = rng.normal(scale=0.3, size=p.arrays[k].shape)
        X, Y = rng.normal(size=(8, 30)), rng.normal(size=(8, 3))
        masks = dn._dropout_masks(cfg, 8, np.random.default_rng(3))
        rels.append(finite_difference_check(p, X, Y, masks))
    rel = np.concatenate(rels)
    frac = float(np.mean(rel < 1e-4))
    elapsed = time.perf_counter() - t0
    record(1, frac >= 0.99 and rel.max() < 1e-3 and elapsed < 30,
           f"{rel.size} params, {frac:.2%} within 1e-4, max {rel.max():.1e}, {elapsed:.1f}s")


# ---- 2 ----------------------------------------------------------------------


def test_criterion_02_loss_equals_dense_log_density():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        C = int(rng.integers(1, 6))
        L = np.tril(rng.normal(scale=0.4, size=(C, C)), -1) + np.diag(np.exp(rng.normal(scale=0.5, size=C)))
        mu, y = rng.normal(size=C), rng.normal(size=C) * 2
        loss = mvn_nll(DensityPrediction(mu[None], L[None], cholesky_to_covariance(L[None])), y[None])[0]
        worst = max(worst, abs(loss + C * math.log(2 * math.pi) + 2 * dense_mvn_logpdf(y, mu, L)))
    record(2, worst <= 1e-10, f"1000 triples, max abs diff {worst:.1e}")


# ---- 3 ----------------------------------------------------------------------


def test_criterion_03_covariance_structure():
    rng = np.random.default_rng(3)
    min_eig_A, min_eig_E, additive, draws = np.inf, np.inf, True, 0
    for d in range(100):
        mode = "full" if d % 2 else "diagonal"
        cfg = NetworkConfig(contracts=3, window_len=6, common_layers=(16, 8), branch_layers=(8,),
                            covariance_mode=mode, dropout_rate=0.2, seed=d)
        p = init_params(cfg)
        # beyond ~2x the init scale sigma_A's condition number passes 1/eps and PD is not representable
        scale = rng.uniform(0.5, 2.0)
        for k in p.arrays:
            p.arrays[k] = p.arrays[k] * scale + (rng.normal(scale=0.2, size=p.arrays[k].shape)
                                                 if k.endswith(".b") else 0.0)
        x = rng.normal(size=(100, cfg.input_dim)) * rng.uniform(0.1, 3.0)
        est = aggregate(dropout_sample_predict(p, x, 30, seed=d))
        sA = est.sigma_A_hat
        assert np.array_equal(sA, np.swapaxes(sA, 1, 2))
        min_eig_A = min(min_eig_A, np.linalg.eigvalsh(sA).min())
        min_eig_E = min(min_eig_E, np.linalg.eigvalsh(est.sigma_E_hat).min())
        additive &= bool(np.array_equal(est.sigma_total, est.sigma_A_hat + est.sigma_E_hat))
        draws += len(x)
    record(3, draws >= 10_000 and min_eig_A > 0 and min_eig_E >= -1e-10 and additive,
           f"{draws} draws, min eig sigma_A {min_eig_A:.2e}, min eig sigma_E {min_eig_E:.1e}, "
           f"additive {additive}")


# ---- 4 ----------------------------------------------------------------------


def test_criterion_04_epistemic_estimator_identity():
    rng = np.random.default_rng(4)
    worst = 0.0
    for N in (2, 3, 30, 60):
        for C in (1, 3, 5):
            mus = rng.normal(size=(N, 7, C)) * rng.uniform(0.01, 5.0)
            L = np.broadcast_to(np.eye(C), (7, C, C)).copy()
            est = aggregate([DensityPrediction(m, L, cholesky_to_covariance(L)) for m in mus])
            mean = mus.sum(axis=0) / N
            dev = mus - mean
            oracle = np.einsum("nbi,nbj->bij", dev, dev) / (N - 1)
            worst = max(worst, float(np.abs(est.sigma_E_hat - oracle).max()))
    cfg = NetworkConfig(contracts=3, window_len=4, common_layers=(16,), branch_layers=(8,), dropout_rate=0.0)
    zero = aggregate(dropout_sample_predict(init_params(cfg), rng.normal(size=(5, 12)), 30, seed=1))
    is_zero = bool(np.all(zero.sigma_E_hat == 0.0))
    record(4, worst <= 1e-12 and is_zero, f"max abs diff {worst:.1e}; zero at dropout 0: {is_zero}")


# ---- 5 ----------------------------------------------------------------------


def test_criterion_05_bayesian_baseline():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 20))
    D = add_constant(X)
    Y = D @ rng.normal(size=(21, 3)) + 0.5 * rng.normal(size=(200, 3))
    post = fit(D, Y, BayesPrior.default(21, 3, tau=1e10))
    Dt = add_constant(rng.normal(size=(50, 20)))
    ols = Dt @ np.linalg.lstsq(D, Y, rcond=None)[0]
    ols_err = float(np.abs(predictive(post, Dt)[0] - ols).max())

    beta0 = rng.normal(size=(4, 2))
    prior = BayesPrior(beta0, 3.0 * np.eye(4), np.array([[1.0, 0.3], [0.3, 2.0]]), n0=12.0)
    d = rng.normal(size=4)
    mean, var, dof = predictive(BayesPosterior(prior), d)
    c_inv = 1.0 + d @ prior.sigma0 @ d
    closed = (np.array_equal(mean, d @ beta0) and np.array_equal(var, c_inv * (prior.omega / (prior.nu0 - 2)))
              and dof == prior.nu0)

    batch = fit(D, Y, BayesPrior.default(21, 3))
    inc = BayesPosterior(BayesPrior.default(21, 3))
    for lo, hi in ((0, 37), (37, 120), (120, 121), (121, 200)):
        inc = fit(D[lo:hi], Y[lo:hi], posterior=inc)
    exact = all(np.array_equal(getattr(inc, k), getattr(batch, k)) for k in ("gram", "cross", "yty")) and all(
        np.array_equal(a, b) for a, b in zip(predictive(inc, Dt), predictive(batch, Dt)))
    record(5, ols_err <= 1e-6 and closed and exact,
           f"flat prior vs OLS {ols_err:.1e}; prior predictive exact {closed}; incremental bit-exact {exact}")


# ---- 6 ----------------------------------------------------------------------


def test_criterion_06_alpha_optimality():
    rng = np.random.default_rng(6)
    passed, worst_scale = 0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 11))
        mu, sigma = rng.uniform(0.01, 3.0, n), rng.uniform(0.05, 2.0, n)
        passed += alpha_optimality_check(mu, sigma, 1e-3)
        a = mu / sigma**2
        s = portfolio_sharpe(a, mu, sigma)
        for c in (1e-3, 0.5, 7.0, 1e4):
            worst_scale = max(worst_scale, abs(portfolio_sharpe(c * a, mu, sigma) - s) / abs(s))
    record(6, passed == 100 and worst_scale <= 1e-12,
           f"{passed}/100 portfolios optimal; scale invariance rel err {worst_scale:.1e}")


# ---- 7 ----------------------------------------------------------------------


def test_criterion_07_sampler_guarantees():
    M = 0.1
    series = synthetic_series(contracts=4, days=10, days_per_month=10, quotes_per_day=300, seed=7)
    curve = align_and_downsample(series, cutoff=M)
    bounds = list(curve.day_boundaries) + [len(curve)]
    days = len(curve.day_boundaries)
    min_step = min(np.abs(np.diff(curve.prices[lo:hi], axis=0)).max(axis=1).min()
                   for lo, hi in zip(bounds[:-1], bounds[1:]) if hi - lo > 1)

    base = make_dataset(build_windows(curve, 100))
    rng = np.random.default_rng(7)
    identical = True
    for i in rng.choice(len(base), size=5, replace=False):
        anchor = base.anchor_times[i]
        mutated = {}
        for c, s in series.items():
            p = s.prices.copy()
            later = s.timestamps > anchor
            p[later] += rng.normal(0.0, 3.0, size=later.sum())
            mutated[c] = MicropriceSeries(c, s.timestamps, p)
        other = make_dataset(build_windows(align_and_downsample(mutated, cutoff=M), 100))
        kb, ko = base.anchor_times <= anchor, other.anchor_times <= anchor
        identical &= np.array_equal(base.anchor_times[kb], other.anchor_times[ko])
        for name in ("windows", "shifts", "scales", "last_prices", "window_vol"):
            identical &= np.array_equal(getattr(base, name)[kb], getattr(other, name)[ko])

    raw = build_windows(curve, 100)
    worst = 0.0
    for i in range(0, len(raw), 25):
        s = normalize_window(raw.windows[i], raw.targets[i])
        back, _ = denormalize_prediction(s.target, np.eye(4), s.shifts, s.scale)
        worst = max(worst, float(np.max(np.abs(back - raw.targets[i]) / np.abs(raw.targets[i]))))
    record(7, days == 10 and min_step >= M and identical and worst <= 1e-12,
           f"{days} days, min same-day step {min_step:.3f} bps, look-ahead identical {identical}, "
           f"round trip {worst:.1e}")


# ---- 8 ----------------------------------------------------------------------


def _three_event_ledger_ok() -> bool:
    # binary fractions throughout, so the hand values are exact in any evaluation order
    mu, sig, real = np.array([0.5, 0.0625, -0.375]), np.array([0.25, 0.25, 0.5]), np.array([0.25, -0.125, 0.375])
    sA = (sig**2)[:, None, None]
    p = PredictionSet(np.arange(3, dtype=np.int64), np.full(3, 20180102), mu[:, None], sA, np.zeros_like(sA),
                      np.ones((3, 1)), real[:, None])
    # alpha = 1 at (mu, sigma) = (0.5, 0.5), so alpha = 0.5 mu / sigma^2
    spec = StrategySpec("Alea", threshold=0.1, rescale_ref=(0.5, 0.5))
    led = run_backtest(p, spec, cost_element=2.0**-7, cost_multiple=2)
    a1, a3 = 4.0, -0.75  # the middle event is below threshold and holds a1
    unit = 2.0**-6
    return (np.array_equal(led.position[:, 0], [a1, a1, a3])
            and np.array_equal(led.dpos[:, 0], [a1, 0.0, a3 - a1])
            and np.array_equal(led.gross[:, 0], [a1 * 0.25, a1 * -0.125, a3 * 0.375])
            and np.array_equal(led.cost[:, 0], [unit * a1, 0.0, unit * 4.75])
            and np.array_equal(led.flatten_cost[:, 0], [unit * 0.75])
            and led.net_pnl == 1.0 - 0.5 - 0.28125 - unit * (4.0 + 4.75 + 0.75))


def _synthetic_prediction_sets():
    from curvecast.walkforward import BacktestSettings, ModelSettings, SweepSettings, walk_forward

    from helpers import synthetic_dataset

    for seed in (1, 2):
        ds = synthetic_dataset(window=20, contracts=3, days=12, days_per_month=1, quotes_per_day=250,
                               signal_strength=0.3, seed=seed)
        res = walk_forward(ds, ModelSettings(kind="bayes"), BacktestSettings(),
                           SweepSettings(cost_multiples=(), thresholds=()), seed=seed)
        yield PredictionSet.concatenate([res.predictions[m] for m in sorted(res.predictions)])


def test_criterion_08_backtest_accounting():
    hand = _three_event_ledger_ok()
    identity = flat = zero_cost = True
    runs = 0
    for p in _synthetic_prediction_sets():
        for kind in ("RlsdVol", "Base", "Alea", "AlEp"):
            for thr in (0.0, 0.1, 0.3):
                for k in (0, 1, 5):
                    led = run_backtest(p, StrategySpec(kind, threshold=thr), cost_multiple=k)
                    runs += 1
                    identity &= math.isclose(led.total_cost, 0.005 * k * led.total_volume,
                                             rel_tol=1e-12, abs_tol=1e-15)
                    last = np.searchsorted(led.days, led.day_labels, side="right") - 1
                    flat &= bool(np.array_equal(np.abs(led.position[last]), led.flatten_volume))
                    if k == 0:
                        zero_cost &= led.net_pnl == led.gross_pnl
    record(8, hand and identity and flat and zero_cost,
           f"hand ledger exact {hand}; {runs} runs: cost identity {identity}, day-flat {flat}, "
           f"zero-cost equals gross {zero_cost}")


# ---- 9 and 10 -------------------------------------------------------------


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    workers = min(len(BENCHMARK_SEEDS), os.cpu_count() or 1)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(benchmark_summary, BENCHMARK_SEEDS))
    return rows, time.perf_counter() - t0, workers


def test_criterion_09_uncertainty_sizing_beats_baselines(benchmark):
    rows, elapsed, workers = benchmark
    beats_base = sum(r["cumulative"]["AlEp"] >= r["cumulative"]["Base"] for r in rows)
    beats_vol = sum(r["cumulative"]["Alea"] >= r["cumulative"]["RlsdVol"]
                    and r["cumulative"]["AlEp"] >= r["cumulative"]["RlsdVol"] for r in rows)
    detail = "; ".join(f"seed {r['seed']}: " + " ".join(f"{k} {v:.2f}" for k, v in r["cumulative"].items())
                       for r in rows)
    record(9, beats_base >= 4 and beats_vol >= 4 and elapsed < 900,
           f"AlEp>=Base in {beats_base}/5, Alea&AlEp>=RlsdVol in {beats_vol}/5, "
           f"{elapsed:.0f}s on {workers} worker(s) [{detail}]")


def test_criterion_10_volume_non_increasing_in_threshold(benchmark):
    rows, _, _ = benchmark
    ok = True
    for r in rows:
        vols = [v for _, v in r["threshold_volume"]]
        ok &= all(b <= a for a, b in zip(vols, vols[1:]))
    thresholds = [t for t, _ in rows[0]["threshold_volume"]]
    record(10, ok, f"{len(rows)} seeds over thresholds {thresholds}")


# ---- 11 -------------------------------------------------------------------


def test_criterion_11_identical_runs_identical_manifests(tmp_path):
    cfg = {
        "data": {"synthetic": {"contracts": 3, "days": 12, "days_per_month": 1, "quotes_per_day": 200,
                               "signal_strength": 0.3}},
        "sampling": {"window": 20},
        "model": {"common_layers": [8], "branch_layers": [4], "max_epochs": 3, "n_samples": 3},
        "sweeps": {"cost_multiples": [0, 1], "thresholds": [0.0, 0.2], "dropout_rates": [0.0, 0.2]},
        "walk_forward": {"validation_months": [9, 10, 11]},
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["run", "--config", str(path), "--out", str(out), "--seed", "12345"]) == 0
        hashes.append(cli._read_json(out / cli.MANIFEST)["artifacts"])
    same = hashes[0] == hashes[1]
    record(11, same and len(hashes[0]) > 10, f"{len(hashes[0])} artifacts, identical hashes {same}")
