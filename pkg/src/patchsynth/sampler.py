"""Posterior sampling of HR patches from a candidate shortlist.

The log-weight of candidate ``j`` is

    -|lr_probe - lr_j|^2 / h  -  (rho / 2) |hr_probe - hr_j|^2

where ``hr_probe`` is the current patch estimate plus its scaled dual.
Weights are normalised with a max-shift, so the partition function is
never formed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class PosteriorParams:
    h: float
    rho: float = 0.0
    k: int = 16

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigurationError(f"temperature h must be positive, got {self.h}")
        if self.rho < 0:
            raise ConfigurationError(f"rho must be non-negative, got {self.rho}")
        if self.k < 1:
            raise ConfigurationError(f"candidate count k must be >= 1, got {self.k}")


def log_weights(lr_sqdist, hr_sqdist, h: float, rho: float) -> np.ndarray:
    lr_sqdist = np.asarray(lr_sqdist, dtype=np.float64)
    hr_sqdist = np.asarray(hr_sqdist, dtype=np.float64)
    return -lr_sqdist / h - 0.5 * rho * hr_sqdist


def normalize_log_weights(logw) -> np.ndarray:
    """Stable softmax along the last axis."""
    logw = np.asarray(logw, dtype=np.float64)
    m = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericalError("all candidate log-weights are -inf or non-finite")
    w = np.exp(logw - m)
    return w / w.sum(axis=-1, keepdims=True)


def posterior_weights_from_distances(lr_sqdist, hr_sqdist, params: PosteriorParams) -> np.ndarray:
    return normalize_log_weights(log_weights(lr_sqdist, hr_sqdist, params.h, params.rho))


def posterior_weights(lr_candidates, hr_candidates, lr_probe, hr_probe, params: PosteriorParams) -> np.ndarray:
    """Posterior over candidate pairs given LR descriptors and HR patches.

    ``hr_probe`` is ``R_i X + u_i``, the current estimate shifted by the dual.
    """
    lr_candidates = np.atleast_2d(np.asarray(lr_candidates, dtype=np.float64))
    hr_candidates = np.atleast_2d(np.asarray(hr_candidates, dtype=np.float64))
    if lr_candidates.shape[0] == 0:
        raise ConfigurationError("posterior needs at least one candidate")
    if lr_candidates.shape[0] != hr_candidates.shape[0]:
        raise ConfigurationError("LR and HR candidate counts differ")
    dl = lr_candidates - np.asarray(lr_probe, dtype=np.float64)
    dh = hr_candidates - np.asarray(hr_probe, dtype=np.float64)
    return posterior_weights_from_distances(
        np.einsum("ij,ij->i", dl, dl), np.einsum("ij,ij->i", dh, dh), params
    )


def inverse_cdf(weights, u) -> np.ndarray:
    """Index ``j`` with ``cdf[j-1] <= u < cdf[j]``; vectorised over leading axes."""
    weights = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(weights, axis=-1)
    u = np.asarray(u, dtype=np.float64)[..., None] * cdf[..., -1:]
    idx = np.sum(cdf <= u, axis=-1)
    return np.minimum(idx, weights.shape[-1] - 1)


def stream(root_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(root_seed, *keys)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys,
    so a draw depends only on its key, never on scheduling order.
    """
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def draw_index(weights, rng: np.random.Generator) -> int:
    return int(inverse_cdf(weights, rng.random()))


def draw_patch(candidates, lr_probe, hr_probe, params: PosteriorParams, rng: np.random.Generator):
    """Sample one of ``candidates`` (a sequence of :class:`PatchPair`)."""
    if len(candidates) == 0:
        raise ConfigurationError("posterior needs at least one candidate")
    w = posterior_weights(
        [c.lr for c in candidates], [c.hr for c in candidates], lr_probe, hr_probe, params
    )
    return candidates[draw_index(w, rng)]
