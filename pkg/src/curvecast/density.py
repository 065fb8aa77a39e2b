"""Two-headed MLP for a heteroskedastic multivariate Gaussian.

The mean head is linear. The second head emits a lower-triangular factor
``L`` of the precision matrix; its diagonal is exponentiated so that
``L @ L.T`` is always positive definite. The per-sample loss is

    -2 * sum(log diag(L)) + (y - mu)^T L L^T (y - mu)

which is ``-2 log N(y; mu, inv(L L^T))`` up to the constant ``C log(2 pi)``.
Everything is float64 numpy with hand-written backpropagation.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "curvecast-density-net"
CHECKPOINT_VERSION = 1


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation in layer {layer}")
        self.layer = layer


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, history: "TrainingHistory"):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.history = history


@dataclass(frozen=True)
class NetworkConfig:
    contracts: int = 9
    window_len: int = 100
    common_layers: tuple[int, ...] = (128, 64)
    branch_layers: tuple[int, ...] = (64,)
    covariance_mode: str = "diagonal"
    dropout_rate: float = 0.1
    l2_lambda: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "common_layers", tuple(int(h) for h in self.common_layers))
        object.__setattr__(self, "branch_layers", tuple(int(h) for h in self.branch_layers))
        if self.covariance_mode not in ("diagonal", "full"):
            raise ValueError(f"covariance_mode must be 'diagonal' or 'full', got {self.covariance_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if self.contracts < 1 or self.window_len < 1:
            raise ValueError("contracts and window_len must be positive")

    @property
    def input_dim(self) -> int:
        return self.window_len * self.contracts

    @property
    def chol_dim(self) -> int:
        C = self.contracts
        return C if self.covariance_mode == "diagonal" else C * (C + 1) // 2

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every dense layer in parameter order."""
        shapes = []
        width = self.input_dim
        for i, h in enumerate(self.common_layers):
            shapes.append((f"trunk.{i}", width, h))
            width = h
        trunk_out = width
        for head, out in (("mean", self.contracts), ("chol", self.chol_dim)):
            width = trunk_out
            for i, h in enumerate(self.branch_layers):
                shapes.append((f"{head}.{i}", width, h))
                width = h
            shapes.append((f"{head}.out", width, out))
        return shapes


@dataclass
class NetworkParams:
    config: NetworkConfig
    arrays: dict[str, np.ndarray]

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.arrays.items())

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    @classmethod
    def from_flat(cls, config: NetworkConfig, blob: np.ndarray) -> "NetworkParams":
        arrays = {}
        pos = 0
        for name, fan_in, fan_out in config.layer_shapes():
            arrays[f"{name}.W"] = blob[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            pos += fan_in * fan_out
            arrays[f"{name}.b"] = blob[pos:pos + fan_out].copy()
            pos += fan_out
        if pos != blob.size:
            raise ValueError(f"parameter blob has {blob.size} values, config expects {pos}")
        return cls(config, arrays)


def init_params(config: NetworkConfig, seed: int | None = None) -> NetworkParams:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    arrays = {}
    for name, fan_in, fan_out in config.layer_shapes():
        bound = 1.0 / math.sqrt(fan_in)
        arrays[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"{name}.b"] = np.zeros(fan_out)
    return NetworkParams(config, arrays)


@dataclass
class DensityPrediction:
    """Batched Gaussian prediction in normalized space; leading axis is the sample."""

    mu: np.ndarray  # (B, C)
    chol_L: np.ndarray  # (B, C, C) precision factor, positive diagonal
    sigma_A: np.ndarray  # (B, C, C)

    def __len__(self):
        return len(self.mu)


def tril_inverse(L: np.ndarray) -> np.ndarray:
    """Inverse of (batched) lower-triangular matrices by forward substitution."""
    L = np.asarray(L, dtype=np.float64)
    single = L.ndim == 2
    if single:
        L = L[None]
    C = L.shape[-1]
    inv = np.zeros_like(L)
    for i in range(C):
        inv[:, i, i] = 1.0 / L[:, i, i]
        if i:
            acc = np.einsum("bk,bkj->bj", L[:, i, :i], inv[:, :i, :i])
            inv[:, i, :i] = -acc / L[:, i, i, None]
    return inv[0] if single else inv


def cholesky_to_covariance(L: np.ndarray) -> np.ndarray:
    """Covariance ``inv(L L^T) = inv(L)^T inv(L)``, symmetrized."""
    Linv = tril_inverse(L)
    sigma = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


def _assemble_L(raw: np.ndarray, C: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    B = raw.shape[0]
    log_diag = raw[:, :C]
    L = np.zeros((B, C, C))
    idx = np.arange(C)
    L[:, idx, idx] = np.exp(log_diag)
    if mode == "full":
        rows, cols = np.tril_indices(C, -1)
        L[:, rows, cols] = raw[:, C:]
    return L, log_diag


def _dropout_masks(config: NetworkConfig, batch: int, rng: np.random.Generator):
    p = config.dropout_rate
    masks = {}
    for name, _, fan_out in config.layer_shapes():
        if name.endswith(".out"):
            continue
        if p > 0.0:
            masks[name] = (rng.random((batch, fan_out)) >= p) / (1.0 - p)
    return masks


def _dense_relu(h, params, name, masks, cache):
    z = h @ params.arrays[f"{name}.W"] + params.arrays[f"{name}.b"]
    a = np.maximum(z, 0.0)
    m = masks.get(name) if masks else None
    out = a * m if m is not None else a
    if not np.isfinite(out).all():
        raise NonFiniteActivationError(name)
    if cache is not None:
        cache[name] = (h, z, m)
    return out


def _dense_linear(h, params, name, cache):
    out = h @ params.arrays[f"{name}.W"] + params.arrays[f"{name}.b"]
    if not np.isfinite(out).all():
        raise NonFiniteActivationError(name)
    if cache is not None:
        cache[name] = (h,)
    return out


def _forward(params: NetworkParams, X: np.ndarray, masks, cache):
    cfg = params.config
    h = X
    for i in range(len(cfg.common_layers)):
        h = _dense_relu(h, params, f"trunk.{i}", masks, cache)
    heads = {}
    for head in ("mean", "chol"):
        g = h
        for i in range(len(cfg.branch_layers)):
            g = _dense_relu(g, params, f"{head}.{i}", masks, cache)
        heads[head] = _dense_linear(g, params, f"{head}.out", cache)
    return heads["mean"], heads["chol"]


def _as_batch(x: np.ndarray, input_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if x.shape[1] != input_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {input_dim}")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return x, single


def forward(params: NetworkParams, x, mode: str = "eval", mask_seed=None) -> DensityPrediction:
    """One pass. ``mode='train'`` samples inverted-dropout masks from ``mask_seed``."""
    cfg = params.config
    X, _ = _as_batch(x, cfg.input_dim)
    if mode == "train":
        rng = mask_seed if isinstance(mask_seed, np.random.Generator) else np.random.default_rng(mask_seed)
        masks = _dropout_masks(cfg, X.shape[0], rng)
    elif mode == "eval":
        masks = None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    mu, raw = _forward(params, X, masks, None)
    L, _ = _assemble_L(raw, cfg.contracts, cfg.covariance_mode)
    return DensityPrediction(mu, L, cholesky_to_covariance(L))


def mvn_nll(pred: DensityPrediction, y) -> np.ndarray:
    """Per-sample loss ``-2 sum log l_ii + r^T L L^T r`` with ``r = y - mu``."""
    y = np.asarray(y, dtype=np.float64).reshape(pred.mu.shape)
    r = y - pred.mu
    u = np.einsum("bij,bi->bj", pred.chol_L, r)
    log_diag = np.log(np.diagonal(pred.chol_L, axis1=1, axis2=2))
    return -2.0 * log_diag.sum(axis=1) + (u * u).sum(axis=1)


def l2_penalty(params: NetworkParams) -> float:
    lam = params.config.l2_lambda
    if lam == 0.0:
        return 0.0
    return lam * sum(float((a * a).sum()) for k, a in params if k.endswith(".W"))


def loss_and_grad(params: NetworkParams, X, Y, masks=None) -> tuple[float, dict[str, np.ndarray]]:
    """Batch objective (mean loss + L2 on weights) and its gradient.

    ``masks`` are the scaled dropout masks of the pass (``None`` for no dropout).
    """
    cfg = params.config
    C = cfg.contracts
    X, _ = _as_batch(X, cfg.input_dim)
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], C)
    B = X.shape[0]
    cache: dict = {}
    mu, raw = _forward(params, X, masks, cache)
    L, log_diag = _assemble_L(raw, C, cfg.covariance_mode)
    r = Y - mu
    u = np.einsum("bij,bi->bj", L, r)
    per_sample = -2.0 * log_diag.sum(axis=1) + (u * u).sum(axis=1)
    loss = float(per_sample.mean()) + l2_penalty(params)

    d_mu = -2.0 * np.einsum("bij,bj->bi", L, u) / B
    d_raw = np.empty_like(raw)
    diag = np.exp(log_diag)
    d_raw[:, :C] = (-2.0 + 2.0 * r * u * diag) / B
    if cfg.covariance_mode == "full":
        rows, cols = np.tril_indices(C, -1)
        d_raw[:, C:] = 2.0 * r[:, rows] * u[:, cols] / B

    grads: dict[str, np.ndarray] = {}

    def back_linear(name, d_out):
        (h,) = cache[name]
        grads[f"{name}.W"] = h.T @ d_out
        grads[f"{name}.b"] = d_out.sum(axis=0)
        return d_out @ params.arrays[f"{name}.W"].T

    def back_relu(name, d_out):
        h, z, m = cache[name]
        d = d_out * m if m is not None else d_out
        d = d * (z > 0.0)
        grads[f"{name}.W"] = h.T @ d
        grads[f"{name}.b"] = d.sum(axis=0)
        return d @ params.arrays[f"{name}.W"].T

    d_trunk = 0.0
    for head, d_head in (("mean", d_mu), ("chol", d_raw)):
        g = back_linear(f"{head}.out", d_head)
        for i in reversed(range(len(cfg.branch_layers))):
            g = back_relu(f"{head}.{i}", g)
        d_trunk = d_trunk + g
    g = d_trunk
    n_trunk = len(cfg.common_layers)
    for i in reversed(range(n_trunk)):
        name = f"trunk.{i}"
        if i == 0:
            # input gradient not needed
            h, z, m = cache[name]
            d = g * m if m is not None else g
            d = d * (z > 0.0)
            grads[f"{name}.W"] = h.T @ d
            grads[f"{name}.b"] = d.sum(axis=0)
        else:
            g = back_relu(name, g)

    if cfg.l2_lambda:
        for k, a in params:
            if k.endswith(".W"):
                grads[k] = grads[k] + 2.0 * cfg.l2_lambda * a
    return loss, {k: grads[k] for k in params.arrays}


def backward(params: NetworkParams, X, Y, mask_seed=None) -> dict[str, np.ndarray]:
    """Gradient of the batch objective; dropout masks drawn from ``mask_seed`` if given."""
    masks = None
    if mask_seed is not None and params.config.dropout_rate > 0:
        X_b, _ = _as_batch(X, params.config.input_dim)
        masks = _dropout_masks(params.config, X_b.shape[0], np.random.default_rng(mask_seed))
    return loss_and_grad(params, X, Y, masks)[1]


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, **kw) -> "AdamState":
        zeros = {k: np.zeros_like(a) for k, a in params}
        return cls(zeros, {k: np.zeros_like(a) for k, a in params}, **kw)


def adam_step(state: AdamState, params: NetworkParams, grads: dict[str, np.ndarray],
              inplace: bool = False) -> tuple[AdamState, NetworkParams]:
    """Bias-corrected Adam update."""
    if not inplace:
        state = AdamState({k: v.copy() for k, v in state.m.items()},
                          {k: v.copy() for k, v in state.v.items()},
                          state.step, state.learning_rate, state.beta1, state.beta2, state.eps)
        params = params.copy()
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[k] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 1024
    patience: int = 15
    max_epochs: int = 500
    seed: int = 0


@dataclass
class TrainingHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Stop after ``patience`` epochs without a strict improvement in validation loss."""

    def __init__(self, patience: int = 15):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when that epoch is the new best."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


def evaluate_loss(params: NetworkParams, X, Y, batch_size: int = 4096) -> float:
    """Mean per-sample loss in eval mode (no dropout, no penalty)."""
    total = 0.0
    n = len(X)
    for lo in range(0, n, batch_size):
        pred = forward(params, X[lo:lo + batch_size], mode="eval")
        total += float(mvn_nll(pred, Y[lo:lo + batch_size]).sum())
    return total / n


def train(train_set, val_set, net_config: NetworkConfig, train_config: TrainConfig = TrainConfig(),
          params: NetworkParams | None = None) -> tuple[NetworkParams, TrainingHistory]:
    """Mini-batch Adam with early stopping; returns the best-validation weights."""
    X, Y = (np.asarray(a, dtype=np.float64) for a in train_set)
    Xv, Yv = (np.asarray(a, dtype=np.float64) for a in val_set)
    X = X.reshape(len(X), -1)
    Xv = Xv.reshape(len(Xv), -1)
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError("training and validation sets must be non-empty")
    params = init_params(net_config) if params is None else params.copy()
    state = AdamState.for_params(params, learning_rate=train_config.learning_rate)
    rng = np.random.default_rng(train_config.seed)
    stopper = EarlyStopping(train_config.patience)
    history = TrainingHistory()
    best = params.copy()
    n = len(X)
    bs = train_config.batch_size
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            masks = _dropout_masks(net_config, len(idx), rng) if net_config.dropout_rate > 0 else None
            try:
                loss, grads = loss_and_grad(params, X[idx], Y[idx], masks)
            except NonFiniteActivationError:
                raise TrainingDivergedError(epoch, history) from None
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, history)
            epoch_loss += loss * len(idx)
            adam_step(state, params, grads, inplace=True)
        try:
            val = evaluate_loss(params, Xv, Yv)
        except NonFiniteActivationError:
            val = math.nan
        if not math.isfinite(val):
            raise TrainingDivergedError(epoch, history)
        history.train_loss.append(epoch_loss / n)
        history.val_loss.append(val)
        if stopper.update(val):
            best = params.copy()
        logger.debug("epoch %d train %.4f val %.4f", epoch, epoch_loss / n, val)
        if stopper.should_stop:
            break
    history.best_epoch = stopper.best_epoch
    history.stopped_epoch = stopper.epoch
    return best, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: NetworkParams, seeds: dict | None = None,
                    history: TrainingHistory | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "seeds": seeds or {},
        "history": history.as_dict() if history is not None else None,
        "n_parameters": params.n_parameters,
    }
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), blob=params.flat())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        blob = z["blob"]
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a density-net checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = NetworkConfig(**meta["config"])
    return NetworkParams.from_flat(config, blob), meta


# ---------------------------------------------------------------------------
# estimator


class DensityNetworkRegressor(RegressorMixin, BaseEstimator):
    """Gaussian density MLP with scikit-learn's fit/predict interface.

    ``X`` holds normalized windows, either flattened ``(n, L*C)`` or shaped
    ``(n, L, C)``; ``y`` the normalized next curve ``(n, C)``. Validation
    data for early stopping can be passed to :meth:`fit`; otherwise the
    trailing ``validation_fraction`` of the rows is held out.
    """

    def __init__(self, common_layers=(128, 64), branch_layers=(64,), covariance_mode="diagonal",
                 dropout_rate=0.1, l2_lambda=1e-8, learning_rate=1e-3, batch_size=1024,
                 patience=15, max_epochs=500, validation_fraction=0.1, random_state=0):
        self.common_layers = common_layers
        self.branch_layers = branch_layers
        self.covariance_mode = covariance_mode
        self.dropout_rate = dropout_rate
        self.l2_lambda = l2_lambda
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _seeds(self):
        ss = np.random.SeedSequence(0 if self.random_state is None else self.random_state)
        init_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        return init_seed, train_seed

    def _check_X(self, X, reset=False):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            if reset:
                self.window_len_, self.n_outputs_ = X.shape[1], X.shape[2]
            X = X.reshape(X.shape[0], -1)
        X = check_array(X, dtype=np.float64)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}")
        return X

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_X(X, reset=True)
        y = check_array(y, dtype=np.float64, ensure_2d=False)
        y = y.reshape(len(y), -1)
        C = y.shape[1]
        if X.shape[1] % C:
            raise ValueError(f"{X.shape[1]} features do not split into windows of {C} contracts")
        self.n_outputs_ = C
        self.window_len_ = X.shape[1] // C
        if X_val is None:
            n_val = max(1, int(round(len(X) * self.validation_fraction)))
            X, X_val, y, y_val = X[:-n_val], X[-n_val:], y[:-n_val], y[-n_val:]
        else:
            X_val = self._check_X(X_val)
            y_val = check_array(y_val, dtype=np.float64, ensure_2d=False).reshape(len(X_val), C)
        init_seed, train_seed = self._seeds()
        self.config_ = NetworkConfig(
            contracts=C, window_len=self.window_len_, common_layers=tuple(self.common_layers),
            branch_layers=tuple(self.branch_layers), covariance_mode=self.covariance_mode,
            dropout_rate=self.dropout_rate, l2_lambda=self.l2_lambda, seed=init_seed,
        )
        tc = TrainConfig(self.learning_rate, self.batch_size, self.patience, self.max_epochs, train_seed)
        self.params_, self.history_ = train((X, y), (X_val, y_val), self.config_, tc)
        return self

    def predict_density(self, X) -> DensityPrediction:
        check_is_fitted(self, "params_")
        return forward(self.params_, self._check_X(X), mode="eval")

    def predict(self, X):
        return self.predict_density(X).mu

    def predict_uncertainty(self, X, n_samples: int = 30, random_state=None):
        """MC-dropout estimate; see :func:`curvecast.uncertainty.dropout_sample_predict`."""
        from .uncertainty import aggregate, dropout_sample_predict

        check_is_fitted(self, "params_")
        seed = self.random_state if random_state is None else random_state
        samples = dropout_sample_predict(self.params_, self._check_X(X), n_samples, seed)
        return aggregate(samples)

    def score_nll(self, X, y) -> float:
        check_is_fitted(self, "params_")
        return evaluate_loss(self.params_, self._check_X(X), np.asarray(y, dtype=np.float64))

    @classmethod
    def from_checkpoint(cls, path) -> "DensityNetworkRegressor":
        params, meta = load_checkpoint(path)
        cfg = params.config
        est = cls(common_layers=cfg.common_layers, branch_layers=cfg.branch_layers,
                  covariance_mode=cfg.covariance_mode, dropout_rate=cfg.dropout_rate,
                  l2_lambda=cfg.l2_lambda)
        est.params_ = params
        est.config_ = cfg
        est.n_outputs_ = cfg.contracts
        est.window_len_ = cfg.window_len
        est.n_features_in_ = cfg.input_dim
        hist = meta.get("history")
        est.history_ = TrainingHistory(**hist) if hist else TrainingHistory()
        return est
