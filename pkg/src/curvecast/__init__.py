"""Forecast futures microprice curves and size trades by their predicted uncertainty."""
from .backtest import PredictionSet, StrategyKind, StrategySpec, run_backtest, size_position
from .bayes import BayesianMultiOutputRegressor, BayesPrior, fit as fit_bayes, predictive
from .config import ConfigError, RunConfig
from .density import DensityNetworkRegressor, NetworkConfig, forward, mvn_nll
from .market_data import (
    QuoteEvent,
    SyntheticMarketConfig,
    generate_synthetic_market,
    microprice,
    parse_quote_stream,
)
from .sampling import WindowDataset, align_and_downsample, build_windows, make_dataset
from .uncertainty import UncertaintyEstimate, aggregate, dropout_sample_predict
from .walkforward import walk_forward

__version__ = "0.1.0"

__all__ = [
    "BayesPrior", "BayesianMultiOutputRegressor", "ConfigError", "DensityNetworkRegressor",
    "NetworkConfig", "PredictionSet", "QuoteEvent", "RunConfig", "StrategyKind", "StrategySpec",
    "SyntheticMarketConfig", "UncertaintyEstimate", "WindowDataset", "aggregate",
    "align_and_downsample", "build_windows", "dropout_sample_predict", "fit_bayes", "forward",
    "generate_synthetic_market", "make_dataset", "microprice", "mvn_nll", "parse_quote_stream",
    "predictive", "run_backtest", "size_position", "walk_forward",
]
