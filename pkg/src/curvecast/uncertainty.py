"""MC-dropout sampling and the aleatoric/epistemic decomposition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DensityPrediction, NetworkParams, forward

DEFAULT_SAMPLES = 30


class EpistemicUndefinedError(ValueError):
    """Fewer than two dropout samples."""


@dataclass
class UncertaintyEstimate:
    """Batched estimate; leading axis indexes inputs."""

    mu_hat: np.ndarray  # (B, C)
    sigma_A_hat: np.ndarray  # (B, C, C)
    sigma_E_hat: np.ndarray  # (B, C, C)
    sigma_total: np.ndarray  # (B, C, C)
    n_samples: int

    def __len__(self):
        return len(self.mu_hat)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def dropout_sample_predict(params: NetworkParams, x, n_samples: int = DEFAULT_SAMPLES,
                           seed=None) -> list[DensityPrediction]:
    """``n_samples`` forward passes with independent dropout masks.

    Pass ``i`` draws its masks from the ``i``-th child of ``SeedSequence(seed)``,
    so the first ``k`` passes do not depend on ``n_samples``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n_samples)
    return [forward(params, x, mode="train", mask_seed=np.random.default_rng(s)) for s in children]


def aggregate(samples) -> UncertaintyEstimate:
    """Mean prediction, mean aleatoric covariance and the unbiased spread of the means."""
    samples = list(samples)
    N = len(samples)
    if N < 2:
        raise EpistemicUndefinedError(f"need at least 2 dropout samples, got {N}")
    mus = np.stack([s.mu for s in samples])  # (N, B, C)
    # shifting by the first pass keeps identical passes at exactly zero spread
    offsets = mus - mus[0]
    mean_offset = offsets.mean(axis=0)
    mu_hat = mus[0] + mean_offset
    sigma_A = _sym(np.mean([s.sigma_A for s in samples], axis=0))
    centred = offsets - mean_offset
    sigma_E = _sym(np.einsum("nbi,nbj->bij", centred, centred) / (N - 1))
    return UncertaintyEstimate(mu_hat, sigma_A, sigma_E, sigma_A + sigma_E, N)
