"""Monthly walk-forward evaluation: fit on months 1..M-1, early-stop on M, trade M+1."""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backtest import (
    DEFAULT_COST_ELEMENT,
    DEFAULT_RESCALE_REF,
    DEFAULT_THRESHOLD,
    PredictionSet,
    StrategyKind,
    StrategySpec,
    TradeLedger,
    calibration_report,
    cumulative_sharpe,
    profit_over_volume,
    run_backtest,
    sharpe,
)
from .bayes import BayesianMultiOutputRegressor
from .density import DensityNetworkRegressor
from .sampling import WindowDataset, denormalize_prediction

logger = logging.getLogger(__name__)

MODEL_KINDS = ("mlp-diag", "mlp-full", "bayes")
TABLE_STRATEGIES = ("RlsdVol", "Base", "Alea", "AlEp")


def derive_seed(master: int, name: str) -> int:
    """Deterministic 63-bit sub-seed for a named consumer of randomness."""
    ss = np.random.SeedSequence([int(master) & (2**64 - 1), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class ModelSettings:
    kind: str = "mlp-diag"
    common_layers: tuple[int, ...] = (128, 64)
    branch_layers: tuple[int, ...] = (64,)
    dropout_rate: float = 0.1
    l2_lambda: float = 1e-8
    learning_rate: float = 1e-3
    batch_size: int = 1024
    patience: int = 15
    max_epochs: int = 500
    n_samples: int = 30
    tau: float = 1e4
    omega_scale: float = 1.0
    n0: float | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.n_samples < 2 and self.kind != "bayes":
            raise ValueError("n_samples must be at least 2 for MC-dropout")


@dataclass
class BacktestSettings:
    strategies: tuple[str, ...] = TABLE_STRATEGIES
    threshold: float = DEFAULT_THRESHOLD
    cost_element: float = DEFAULT_COST_ELEMENT
    cost_multiple: float = 0.0
    clip: float | None = None
    rescale_ref: tuple[float, float] = DEFAULT_RESCALE_REF

    def spec(self, kind, threshold: float | None = None) -> StrategySpec:
        return StrategySpec(StrategyKind(kind), self.threshold if threshold is None else threshold,
                            tuple(self.rescale_ref), self.clip)


@dataclass
class SweepSettings:
    cost_multiples: tuple[float, ...] = tuple(range(13))
    thresholds: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5)
    threshold_strategy: str = "AlEp"
    dropout_rates: tuple[float, ...] = ()


def make_model(settings: ModelSettings, seed: int, dropout_rate: float | None = None):
    if settings.kind == "bayes":
        return BayesianMultiOutputRegressor(settings.tau, settings.omega_scale, settings.n0)
    return DensityNetworkRegressor(
        common_layers=tuple(settings.common_layers), branch_layers=tuple(settings.branch_layers),
        covariance_mode="diagonal" if settings.kind == "mlp-diag" else "full",
        dropout_rate=settings.dropout_rate if dropout_rate is None else dropout_rate,
        l2_lambda=settings.l2_lambda, learning_rate=settings.learning_rate,
        batch_size=settings.batch_size, patience=settings.patience,
        max_epochs=settings.max_epochs, random_state=seed,
    )


def dataset_months(ds: WindowDataset) -> list[int]:
    return sorted(int(m) for m in np.unique(ds.months))


@dataclass(frozen=True)
class Fold:
    M: int  # 1-based ordinal of the validation month
    train_months: tuple[int, ...]
    val_month: int
    test_month: int | None


def make_folds(months: Sequence[int], validation_months: Sequence[int]) -> list[Fold]:
    folds = []
    for M in validation_months:
        if M < 2 or M > len(months):
            raise ValueError(f"validation month {M} outside the {len(months)} months of data")
        test = months[M] if M < len(months) else None
        folds.append(Fold(M, tuple(months[:M - 1]), months[M - 1], test))
    return folds


def fit_fold(ds: WindowDataset, fold: Fold, settings: ModelSettings, seed: int,
             dropout_rate: float | None = None):
    train = ds.subset(np.isin(ds.months, fold.train_months))
    val = ds.subset(ds.months == fold.val_month)
    if len(train) == 0 or len(val) == 0:
        raise ValueError(f"fold M={fold.M}: empty training or validation month")
    model = make_model(settings, seed, dropout_rate)
    if settings.kind == "bayes":
        model.fit(train.features(), train.targets)
    else:
        model.fit(train.features(), train.targets, X_val=val.features(), y_val=val.targets)
    return model


def predict_fold(model, test: WindowDataset, settings: ModelSettings, seed: int) -> PredictionSet:
    """Denormalized predictions for one test month."""
    if settings.kind == "bayes":
        est = model.predict_uncertainty(test.features())
    else:
        est = model.predict_uncertainty(test.features(), n_samples=settings.n_samples, random_state=seed)
    mu_bps, sigma_A = denormalize_prediction(est.mu_hat, est.sigma_A_hat, test.shifts, test.scales)
    _, sigma_E = denormalize_prediction(est.mu_hat, est.sigma_E_hat, test.shifts, test.scales)
    return PredictionSet(
        anchor_times=test.anchor_times.copy(), days=test.days.copy(),
        mu_change=mu_bps - test.last_prices, sigma_A=sigma_A, sigma_E=sigma_E,
        window_vol=test.window_vol.copy(), realized_change=test.realized_change,
    )


# ---------------------------------------------------------------------------
# reports


@dataclass
class PerformanceReport:
    month_labels: list[int]  # ordinal months shown as table rows
    monthly: dict[str, dict[int, float | None]]  # strategy -> ordinal month -> Sharpe or absent
    cumulative: dict[str, float]
    profit_over_volume: dict[str, float]
    avg_daily_volume: dict[str, float]
    calibration: list = field(default_factory=list)
    cost_sweep: list[tuple] = field(default_factory=list)  # (strategy, multiple, sharpe)
    threshold_sweep: list[tuple] = field(default_factory=list)  # (strategy, threshold, pov, adv, sharpe)
    dropout_sweep: list[tuple] = field(default_factory=list)  # (rate, strategy, sharpe)
    daily_paths: list[tuple] = field(default_factory=list)  # (strategy, day, ret, cum)
    model: str = ""

    @property
    def populated_months(self) -> list[int]:
        any_strategy = next(iter(self.monthly.values()), {})
        return [m for m in self.month_labels if any_strategy.get(m) is not None]

    def table_rows(self) -> list[list[str]]:
        strategies = list(self.monthly)
        rows = [["month"] + [f"{self.model}:{s}" if self.model else s for s in strategies]]
        for m in self.month_labels:
            rows.append([str(m)] + [_fmt(self.monthly[s].get(m)) for s in strategies])
        rows.append(["Cuml"] + [_fmt(self.cumulative[s]) for s in strategies])
        return rows

    def write(self, directory) -> list[str]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []

        def dump(name, header, rows):
            with open(d / name, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if header:
                    w.writerow(header)
                w.writerows([[_fmt(v) if isinstance(v, float) else v for v in r] for r in rows])
            written.append(name)

        dump("monthly_sharpe.csv", None, self.table_rows())
        dump("summary.csv", ("strategy", "cumulative_sharpe", "profit_over_volume", "avg_daily_volume"),
             [(s, self.cumulative[s], self.profit_over_volume[s], self.avg_daily_volume[s])
              for s in self.monthly])
        dump("calibration.csv", ("month", "side", "median_reward_risk", "sharpe", "n_trades"),
             [(r.month, r.side, r.median_ratio, r.sharpe, r.n_trades) for r in self.calibration])
        dump("cost_sweep.csv", ("strategy", "cost_multiple", "sharpe"), self.cost_sweep)
        dump("threshold_sweep.csv",
             ("strategy", "threshold", "profit_over_volume", "avg_daily_volume", "sharpe"),
             self.threshold_sweep)
        dump("dropout_sweep.csv", ("dropout_rate", "strategy", "sharpe"), self.dropout_sweep)
        dump("cumulative_returns.csv", ("strategy", "day", "daily_return_bps", "cumulative_bps"),
             self.daily_paths)
        return written


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return repr(float(v))


def evaluate(predictions: Mapping[int, PredictionSet], month_labels: Sequence[int],
             backtest: BacktestSettings, sweeps: SweepSettings | None = None,
             model: str = "") -> PerformanceReport:
    """Backtest every strategy on the test months in ``predictions`` (keyed by ordinal month)."""
    sweeps = sweeps or SweepSettings(cost_multiples=(), thresholds=())
    tested = sorted(m for m, p in predictions.items() if len(p))
    pooled = PredictionSet.concatenate([predictions[m] for m in tested]) if tested else None
    ordinal = {}
    if pooled is not None:
        for m in tested:
            for cal in np.unique(predictions[m].months):
                ordinal[int(cal)] = m

    monthly, cumulative, pov, adv = {}, {}, {}, {}
    calibration, paths = [], []
    for name in backtest.strategies:
        spec = backtest.spec(name)
        row = {m: None for m in month_labels}
        if pooled is None:
            monthly[name], cumulative[name] = row, math.nan
            pov[name] = adv[name] = math.nan
            continue
        ledger = run_backtest(pooled, spec, backtest.cost_element, backtest.cost_multiple)
        days, rets = ledger.daily_returns()
        for m in tested:
            sel = np.isin(days // 100, np.unique(predictions[m].months))
            row[m] = sharpe(rets[sel])
        monthly[name] = row
        cumulative[name] = sharpe(rets)
        pov[name] = profit_over_volume(ledger)
        adv[name] = float(ledger.daily_volume().mean())
        cum = np.cumsum(rets)
        paths.extend((name, int(dy), float(r), float(c)) for dy, r, c in zip(days, rets, cum))
        if spec.kind is StrategyKind.AL_EP:
            calibration = _relabel(calibration_report(ledger), ordinal)

    cost_rows, thr_rows = [], []
    if pooled is not None:
        for name in backtest.strategies:
            spec = backtest.spec(name)
            for k in sweeps.cost_multiples:
                led = run_backtest(pooled, spec, backtest.cost_element, k)
                cost_rows.append((name, float(k), cumulative_sharpe(led)))
        name = sweeps.threshold_strategy
        for thr in sweeps.thresholds:
            led = run_backtest(pooled, backtest.spec(name, thr), backtest.cost_element,
                               backtest.cost_multiple)
            thr_rows.append((name, float(thr), profit_over_volume(led),
                             float(led.daily_volume().mean()), cumulative_sharpe(led)))
    return PerformanceReport(list(month_labels), monthly, cumulative, pov, adv, calibration,
                             cost_rows, thr_rows, [], paths, model)


def _relabel(rows, ordinal):
    from .backtest import CalibrationRow

    return [CalibrationRow(ordinal.get(r.month, r.month), r.side, r.median_ratio, r.sharpe, r.n_trades)
            for r in rows]


def table_month_labels(validation_months: Sequence[int]) -> list[int]:
    return list(range(min(validation_months), max(validation_months) + 2))


@dataclass
class WalkForwardResult:
    report: PerformanceReport
    predictions: dict[int, PredictionSet]
    models: dict[int, object]


def walk_forward(ds: WindowDataset, settings: ModelSettings, backtest: BacktestSettings,
                 sweeps: SweepSettings | None = None, seed: int = 0,
                 validation_months: Sequence[int] = (7, 8, 9, 10, 11)) -> WalkForwardResult:
    """Run every fold, backtest the test months and assemble the report."""
    sweeps = sweeps or SweepSettings()
    months = dataset_months(ds)
    if len(months) < 8:
        raise ValueError(f"walk-forward needs at least 8 months of data, got {len(months)}")
    folds = make_folds(months, validation_months)
    predictions, models = {}, {}
    for fold in folds:
        if fold.test_month is None:
            continue
        test = ds.subset(ds.months == fold.test_month)
        if len(test) == 0:
            logger.warning("fold M=%d: test month %d has no samples", fold.M, fold.test_month)
            continue
        model = fit_fold(ds, fold, settings, derive_seed(seed, f"train.M{fold.M}"))
        models[fold.M + 1] = model
        predictions[fold.M + 1] = predict_fold(model, test, settings, derive_seed(seed, f"mc.M{fold.M}"))
    report = evaluate(predictions, table_month_labels(validation_months), backtest, sweeps, settings.kind)
    if sweeps.dropout_rates and settings.kind != "bayes":
        report.dropout_sweep = dropout_sweep(ds, folds, settings, backtest, sweeps.dropout_rates, seed)
    return WalkForwardResult(report, predictions, models)


def dropout_sweep(ds, folds, settings, backtest, rates, seed) -> list[tuple]:
    preds_by_rate = {}
    for rate in rates:
        preds = []
        for fold in folds:
            if fold.test_month is None:
                continue
            test = ds.subset(ds.months == fold.test_month)
            if len(test) == 0:
                continue
            model = fit_fold(ds, fold, settings, derive_seed(seed, f"train.M{fold.M}"), dropout_rate=rate)
            preds.append(predict_fold(model, test, settings, derive_seed(seed, f"mc.M{fold.M}")))
        preds_by_rate[float(rate)] = preds
    return dropout_sweep_rows(preds_by_rate, backtest)


def dropout_sweep_rows(preds_by_rate: Mapping[float, Sequence[PredictionSet]],
                       backtest: BacktestSettings) -> list[tuple]:
    """Cumulative Sharpe of the model-driven strategies for each dropout rate."""
    rows = []
    for rate, preds in preds_by_rate.items():
        preds = [p for p in preds if len(p)]
        for name in ("Base", "Alea", "AlEp"):
            if not preds:
                rows.append((float(rate), name, math.nan))
                continue
            led = run_backtest(PredictionSet.concatenate(preds), backtest.spec(name),
                               backtest.cost_element, backtest.cost_multiple)
            rows.append((float(rate), name, cumulative_sharpe(led)))
    return rows
