"""Conjugate Bayesian multi-output linear regression.

Matrix-normal prior on the coefficients given the noise covariance and an
inverse-Wishart prior on the noise covariance; the posterior predictive of a
new row is multivariate Student-t. Only sufficient statistics are kept.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .uncertainty import UncertaintyEstimate

BLOCK_ROWS = 1024
CHECKPOINT_FORMAT = "curvecast-bayes-posterior"
CHECKPOINT_VERSION = 1


class VarianceUndefinedError(ValueError):
    """Predictive degrees of freedom do not exceed 2."""


class NumericalConditioningError(ArithmeticError):
    """Predictive scale matrix is not positive definite."""


def add_constant(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    elif X.ndim > 2:
        X = X.reshape(X.shape[0], -1)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _spd_inverse(M: np.ndarray) -> np.ndarray:
    inv = cho_solve(cho_factor(M, lower=True), np.eye(len(M)))
    return 0.5 * (inv + inv.T)


@dataclass
class BayesPrior:
    beta0: np.ndarray  # (p, C)
    sigma0: np.ndarray  # (p, p) row covariance
    omega: np.ndarray  # (C, C)
    n0: float

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, dtype=np.float64)
        self.sigma0 = np.asarray(self.sigma0, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        p, C = self.beta0.shape
        if self.sigma0.shape != (p, p) or self.omega.shape != (C, C):
            raise ValueError("prior shapes are inconsistent")
        for name in ("sigma0", "omega"):
            M = getattr(self, name)
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            try:
                cho_factor(M, lower=True)
            except LinAlgError:
                raise ValueError(f"{name} must be positive definite") from None
        if not self.nu0 > C + 1:
            raise ValueError(f"nu0 = {self.nu0} must exceed C + 1 = {C + 1}; raise n0")
        self.sigma0_inv = _spd_inverse(self.sigma0)

    @property
    def n_features(self) -> int:
        return self.beta0.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.beta0.shape[1]

    @property
    def nu0(self) -> float:
        p, C = self.beta0.shape
        return self.n0 - (C + p) + 1

    @classmethod
    def default(cls, n_features: int, n_outputs: int, tau: float = 1e4,
                omega_scale: float = 1.0, n0: float | None = None) -> "BayesPrior":
        """Zero-mean prior with ``sigma0 = tau * I`` and ``omega = omega_scale * I``.

        The default ``n0`` puts ``nu0`` at ``C + 3``, the smallest integer
        value that keeps the prior noise covariance mean finite with margin.
        """
        p, C = n_features, n_outputs
        if n0 is None:
            n0 = p + 2 * C + 2
        return cls(np.zeros((p, C)), tau * np.eye(p), omega_scale * np.eye(C), float(n0))


@dataclass
class BayesPosterior:
    """Sufficient statistics, accumulated in fixed blocks of global row index.

    Rows are summed block by block in stream order, so splitting a data set
    into arbitrary chunks reproduces the one-shot statistics bit for bit.
    """

    prior: BayesPrior
    n: int = 0
    _gram: np.ndarray = None
    _cross: np.ndarray = None
    _yty: np.ndarray = None
    _pend_D: np.ndarray = None
    _pend_Y: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        p, C = self.prior.n_features, self.prior.n_outputs
        if self._gram is None:
            self._gram = np.zeros((p, p))
            self._cross = np.zeros((p, C))
            self._yty = np.zeros((C, C))
        if self._pend_D is None:
            self._pend_D = np.zeros((0, p))
            self._pend_Y = np.zeros((0, C))

    # statistics -----------------------------------------------------------
    @property
    def gram(self) -> np.ndarray:
        D = self._pend_D
        return self._gram + D.T @ D if len(D) else self._gram.copy()

    @property
    def cross(self) -> np.ndarray:
        D, Y = self._pend_D, self._pend_Y
        return self._cross + D.T @ Y if len(D) else self._cross.copy()

    @property
    def yty(self) -> np.ndarray:
        Y = self._pend_Y
        return self._yty + Y.T @ Y if len(Y) else self._yty.copy()

    @property
    def dof(self) -> float:
        return self.n + self.prior.nu0

    # factorisations -------------------------------------------------------
    def _factor(self):
        if "factor" not in self._cache:
            P = self.prior.sigma0_inv
            A = self.gram + P
            factor = cho_factor(A, lower=True)
            if self.n == 0:
                # no data: the posterior is the prior, without solver round-off
                C = self.prior.n_outputs
                self._cache.update(factor=factor, coef=self.prior.beta0.copy(), a_star=np.zeros((C, C)))
                return self._cache
            rhs = self.cross + P @ self.prior.beta0
            coef = cho_solve(factor, rhs)
            a_star = self.yty + self.prior.beta0.T @ P @ self.prior.beta0 - rhs.T @ coef
            self._cache.update(factor=factor, coef=coef, a_star=0.5 * (a_star + a_star.T))
        return self._cache

    @property
    def coef(self) -> np.ndarray:
        """Posterior-mean coefficients ``(D^T D + S0^-1)^-1 (D^T Y + S0^-1 beta0)``."""
        return self._factor()["coef"]

    @property
    def a_star(self) -> np.ndarray:
        return self._factor()["a_star"]

    def scale_matrix(self) -> np.ndarray:
        """``(omega + A*) / (n + nu0 - 2)``; the covariance at ``C^-1 = 1``."""
        dof = self.dof
        if not dof > 2:
            raise VarianceUndefinedError(f"predictive dof {dof} <= 2")
        M = self.prior.omega + self.a_star
        M = 0.5 * (M + M.T)
        try:
            cho_factor(M, lower=True)
        except LinAlgError:
            raise NumericalConditioningError("omega + A* is not positive definite") from None
        return M / (dof - 2.0)

    def leverage(self, D_t) -> np.ndarray:
        """Scalar ``C^-1 = 1 + d (D^T D + S0^-1)^-1 d^T`` for each row."""
        D_t = np.atleast_2d(np.asarray(D_t, dtype=np.float64))
        if self.n == 0:
            return 1.0 + np.einsum("bp,pq,bq->b", D_t, self.prior.sigma0, D_t)
        Z = cho_solve(self._factor()["factor"], D_t.T)
        return 1.0 + np.einsum("bp,pb->b", D_t, Z)


def fit(D, Y, prior: BayesPrior | None = None, posterior: BayesPosterior | None = None) -> BayesPosterior:
    """Fold rows (constant column already appended) into a new posterior."""
    D = np.asarray(D, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if D.ndim != 2:
        raise ValueError("design must be 2-D")
    Y = Y.reshape(len(D), -1) if Y.ndim != 2 else Y
    if len(Y) != len(D):
        raise ValueError(f"design has {len(D)} rows, targets have {len(Y)}")
    if posterior is None:
        if prior is None:
            prior = BayesPrior.default(D.shape[1], Y.shape[1])
        posterior = BayesPosterior(prior)
    prior = posterior.prior
    if D.shape[1] != prior.n_features or Y.shape[1] != prior.n_outputs:
        raise ValueError(
            f"data has {D.shape[1]} features / {Y.shape[1]} outputs, "
            f"prior expects {prior.n_features} / {prior.n_outputs}"
        )
    gram, cross, yty = posterior._gram.copy(), posterior._cross.copy(), posterior._yty.copy()
    pend_D = np.vstack([posterior._pend_D, D])
    pend_Y = np.vstack([posterior._pend_Y, Y])
    n_full = (len(pend_D) // BLOCK_ROWS) * BLOCK_ROWS
    for lo in range(0, n_full, BLOCK_ROWS):
        bD = pend_D[lo:lo + BLOCK_ROWS]
        bY = pend_Y[lo:lo + BLOCK_ROWS]
        gram += bD.T @ bD
        cross += bD.T @ bY
        yty += bY.T @ bY
    return BayesPosterior(prior, posterior.n + len(D), gram, cross, yty,
                          pend_D[n_full:].copy(), pend_Y[n_full:].copy())


def predictive(post: BayesPosterior, d_t) -> tuple[np.ndarray, np.ndarray, float]:
    """Posterior-predictive mean, covariance and degrees of freedom.

    ``d_t`` is one row with the constant appended, or a batch of rows, in
    which case the mean is ``(B, C)`` and the covariance ``(B, C, C)``.
    """
    d_t = np.asarray(d_t, dtype=np.float64)
    single = d_t.ndim == 1
    D_t = np.atleast_2d(d_t)
    scale = post.scale_matrix()
    mean = D_t @ post.coef
    var = post.leverage(D_t)[:, None, None] * scale
    if single:
        return mean[0], var[0], post.dof
    return mean, var, post.dof


def save_posterior(path, post: BayesPosterior) -> None:
    pr = post.prior
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "n": post.n, "n0": pr.n0}
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), beta0=pr.beta0, sigma0=pr.sigma0,
             omega=pr.omega, gram=post._gram, cross=post._cross, yty=post._yty,
             pend_D=post._pend_D, pend_Y=post._pend_Y)


def load_posterior(path) -> BayesPosterior:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a Bayesian posterior checkpoint")
        prior = BayesPrior(z["beta0"], z["sigma0"], z["omega"], meta["n0"])
        return BayesPosterior(prior, meta["n"], z["gram"], z["cross"], z["yty"], z["pend_D"], z["pend_Y"])


class BayesianMultiOutputRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper; a constant column is appended to ``X`` internally.

    :meth:`predict_uncertainty` splits the predictive covariance
    ``S * C^-1`` into a noise part ``S`` and a parameter part ``S * (C^-1 - 1)``.
    """

    def __init__(self, tau=1e4, omega_scale=1.0, n0=None):
        self.tau = tau
        self.omega_scale = omega_scale
        self.n0 = n0

    def _design(self, X):
        X = np.asarray(X, dtype=np.float64)
        X = check_array(X.reshape(X.shape[0], -1))
        if hasattr(self, "n_features_in_") and X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with {self.n_features_in_}")
        return add_constant(X)

    def fit(self, X, y):
        for attr in ("posterior_", "n_features_in_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        D = self._design(X)
        Y = check_array(y, ensure_2d=False, dtype=np.float64).reshape(len(D), -1)
        if not hasattr(self, "posterior_"):
            self.n_features_in_ = D.shape[1] - 1
            self.n_outputs_ = Y.shape[1]
            prior = BayesPrior.default(D.shape[1], Y.shape[1], self.tau, self.omega_scale, self.n0)
            self.posterior_ = BayesPosterior(prior)
        self.posterior_ = fit(D, Y, posterior=self.posterior_)
        return self

    def predict(self, X):
        check_is_fitted(self, "posterior_")
        return self._design(X) @ self.posterior_.coef

    def predict_distribution(self, X):
        check_is_fitted(self, "posterior_")
        return predictive(self.posterior_, self._design(X))

    def predict_uncertainty(self, X) -> UncertaintyEstimate:
        check_is_fitted(self, "posterior_")
        D = self._design(X)
        scale = self.posterior_.scale_matrix()
        lev = self.posterior_.leverage(D)
        B = len(D)
        sigma_A = np.broadcast_to(scale, (B,) + scale.shape).copy()
        sigma_E = (lev - 1.0)[:, None, None] * scale
        return UncertaintyEstimate(D @ self.posterior_.coef, sigma_A, sigma_E, sigma_A + sigma_E, 0)
