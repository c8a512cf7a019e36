"""Finite-particle surrogates for the KL(Q || prior) term.

``prior_potential`` keeps only the prior cross-entropy (weight-decay
analogue, constant dropped). ``kde_kl`` smooths the particle measure with an
isotropic Gaussian kernel and evaluates the smoothed KL at the particle
locations; its entropy part repels nearby particles.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Union

import numpy as np

from .numerics import logsumexp, softmax

log = logging.getLogger(__name__)

FALLBACK_BANDWIDTH = 1e-2


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior N(0, tau^2 I)."""

    tau: float = 1.0
    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unsupported prior kind {self.kind!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def log_density(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        d = theta.shape[1]
        return -0.5 * np.sum(theta * theta, axis=1) / self.tau**2 - 0.5 * d * math.log(2 * math.pi * self.tau**2)


@dataclass(frozen=True)
class KdeSpec:
    bandwidth: Union[float, str] = "median"

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError("bandwidth must be a positive number or 'median'")
        elif not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def prior_potential(params, prior: PriorSpec, lam: float):
    """(lam / (2 M tau^2)) * sum ||theta_i||^2 and its per-particle gradients."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    p = np.asarray(params, dtype=float)
    m = p.shape[0]
    value = lam / (2.0 * m * prior.tau**2) * float(np.sum(p * p))
    return value, lam / (m * prior.tau**2) * p


def _pairwise_sq(p: np.ndarray) -> np.ndarray:
    diff = p[:, None, :] - p[None, :, :]
    return np.sum(diff * diff, axis=2)


def resolve_bandwidth(params) -> float:
    """Median pairwise distance divided by sqrt(2 log(M + 1))."""
    p = np.asarray(params, dtype=float)
    m = p.shape[0]
    if m < 2:
        raise ValueError("heuristic needs >=2 particles")
    iu = np.triu_indices(m, k=1)
    med = float(np.median(np.sqrt(_pairwise_sq(p)[iu])))
    return med / math.sqrt(2.0 * math.log(m + 1.0))


def bandwidth_for(params, kde: KdeSpec) -> float:
    if not isinstance(kde.bandwidth, str):
        return float(kde.bandwidth)
    eps = resolve_bandwidth(params) if np.asarray(params).shape[0] >= 2 else 0.0
    if not eps > 0:
        warnings.warn(f"median-heuristic bandwidth degenerate; using {FALLBACK_BANDWIDTH}", RuntimeWarning)
        log.warning("median-heuristic bandwidth degenerate; falling back to %g", FALLBACK_BANDWIDTH)
        return FALLBACK_BANDWIDTH
    return eps


def kde_kl(params, prior: PriorSpec, kde: KdeSpec, lam: float):
    """(lam / M) * sum_i [log q_eps(theta_i) - log prior(theta_i)] and its gradients.

    The bandwidth is resolved once from the current particles and held fixed
    while differentiating.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    p = np.asarray(params, dtype=float)
    m, d = p.shape
    eps = bandwidth_for(p, kde)
    logk = -0.5 * _pairwise_sq(p) / eps**2  # (M, M), symmetric
    log_q = logsumexp(logk, axis=1) - math.log(m) - 0.5 * d * math.log(2 * math.pi * eps**2)
    value = lam / m * float(np.sum(log_q - prior.log_density(p)))
    # a[i, j]: weight of kernel j in q(theta_i)
    a = softmax(logk, axis=1)
    # d/d theta_k sum_i log q(theta_i) = sum_j (a_kj + a_jk) (theta_j - theta_k) / eps^2
    c = a + a.T
    grad_entropy = (c @ p - np.sum(c, axis=1)[:, None] * p) / eps**2
    grads = lam / m * (grad_entropy + p / prior.tau**2)
    return value, grads
