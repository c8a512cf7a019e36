"""Finite-particle alpha-Renyi losses, responsibilities and gradients.

For particle log-likelihoods ``s_i`` of one example, the loss is

    l_alpha = -(1/alpha) * (logsumexp(alpha * s) - log M)     (alpha > 0)
    l_0     = -mean(s)

and the responsibilities are ``softmax(alpha * s)`` over particles. Minibatch
losses carry the ``N / B`` scaling so that a full pass estimates the sum over
the training set.

The ``*_check`` helpers evaluate exact identities and inequalities of this
loss; they are used by the test-suite and by the ``check`` command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .models import ConditionalModel, DataPoint, Dataset
from .numerics import logsumexp, ordered_map, softmax


@dataclass
class ParticleEnsemble:
    """M parameter vectors of one model family; the uniform empirical measure over them."""

    model: ConditionalModel
    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("params must have shape (M, d) with M >= 1")
        if p.shape[1] != self.model.param_dim:
            raise ValueError(f"particle length {p.shape[1]} != model dimension {self.model.param_dim}")
        if not np.all(np.isfinite(p)):
            raise ValueError("particle parameters must be finite")
        self.params = p

    @property
    def M(self) -> int:
        return self.params.shape[0]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.model, self.params.copy())


@dataclass(frozen=True)
class AlphaConfig:
    alpha: float
    lam: float = 0.0
    n_train: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.n_train < 1:
            raise ValueError("N must be at least 1")


class ResponsibilityMatrix(NamedTuple):
    weights: np.ndarray  # (M, B), columns sum to one
    ess: np.ndarray  # (B,)


class UnsupportedExampleError(ValueError):
    """All particles assign zero likelihood to an example."""

    def __init__(self, index: int):
        super().__init__(f"all particle log-likelihoods are -inf for example {index}")
        self.index = index


def score_matrix(ensemble: ParticleEnsemble, batch: Dataset) -> np.ndarray:
    """s[i, b] = log p_{theta_i}(y_b | x_b)."""
    rows = ordered_map(lambda th: ensemble.model.log_lik_batch(th, batch.X, batch.Y), list(ensemble.params))
    return np.stack(rows)


def score_gradients(ensemble: ParticleEnsemble, batch: Dataset) -> np.ndarray:
    """grad_s[i, b, :] = grad_theta log p_{theta_i}(y_b | x_b)."""
    rows = ordered_map(lambda th: ensemble.model.grad_log_lik_batch(th, batch.X, batch.Y), list(ensemble.params))
    return np.stack(rows)


def _as_batch(point_or_batch) -> Dataset:
    if isinstance(point_or_batch, DataPoint):
        return Dataset(point_or_batch.x[None, :], point_or_batch.y[None, :])
    return point_or_batch


def loss_from_scores(scores, alpha: float) -> np.ndarray:
    """Per-column alpha-Renyi loss of an (M, B) score matrix."""
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    dead = np.all(np.isneginf(s), axis=0)
    if dead.any():
        raise UnsupportedExampleError(int(np.flatnonzero(dead)[0]))
    m = s.shape[0]
    if alpha == 0.0:
        return -np.mean(s, axis=0)
    out = np.empty(s.shape[1])
    finite = np.all(np.isfinite(s), axis=0)
    if not finite.all():
        out[~finite] = -(logsumexp(alpha * s[:, ~finite], axis=0) - math.log(m)) / alpha
    if finite.any():
        # centred form: l = -mean(s) - (1/alpha) log mean exp(alpha c); for small
        # alpha*|c| the log1p/expm1 route keeps the 1/alpha division exact
        sf = s[:, finite]
        mu = np.mean(sf, axis=0)
        c = alpha * (sf - mu)
        small = np.max(np.abs(c), axis=0) <= 0.5
        g = np.empty(sf.shape[1])
        if small.any():
            g[small] = np.log1p(np.mean(np.expm1(c[:, small]), axis=0))
        if (~small).any():
            g[~small] = logsumexp(c[:, ~small], axis=0) - math.log(m)
        out[finite] = -mu - g / alpha
    return out


def weights_from_scores(scores, alpha: float) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if alpha == 0.0:
        return np.full(s.shape, 1.0 / s.shape[0])
    return softmax(alpha * s, axis=0)


def ess(weights) -> np.ndarray | float:
    """Effective sample size 1 / sum(w^2), per column for a matrix."""
    w = np.asarray(weights, dtype=float)
    out = 1.0 / np.sum(w * w, axis=0)
    return float(out) if w.ndim == 1 else out


def per_example_loss(ensemble: ParticleEnsemble, cfg: AlphaConfig, point: DataPoint) -> float:
    return float(loss_from_scores(score_matrix(ensemble, _as_batch(point)), cfg.alpha)[0])


def responsibilities(ensemble: ParticleEnsemble, cfg: AlphaConfig, batch: Dataset) -> ResponsibilityMatrix:
    w = weights_from_scores(score_matrix(ensemble, _as_batch(batch)), cfg.alpha)
    return ResponsibilityMatrix(w, ess(w))


def minibatch_data_loss(ensemble: ParticleEnsemble, cfg: AlphaConfig, batch: Dataset) -> float:
    batch = _as_batch(batch)
    b = len(batch)
    losses = loss_from_scores(score_matrix(ensemble, batch), cfg.alpha)
    return cfg.n_train / b * float(np.sum(losses))


def gradients_from_scores(weights, grads, scale: float) -> np.ndarray:
    """g_i = -scale * sum_b w[i, b] * grads[i, b]."""
    return -scale * np.einsum("ib,ibd->id", weights, grads)


def particle_gradients(ensemble: ParticleEnsemble, cfg: AlphaConfig, batch: Dataset) -> np.ndarray:
    """Gradient of ``minibatch_data_loss`` with respect to every particle, shape (M, d)."""
    batch = _as_batch(batch)
    w = weights_from_scores(score_matrix(ensemble, batch), cfg.alpha)
    return gradients_from_scores(w, score_gradients(ensemble, batch), cfg.n_train / len(batch))


# --- identities and inequalities -------------------------------------------


class IdentityCheck(NamedTuple):
    lhs: float
    rhs: float
    gap: float


class EntropyDecomposition(NamedTuple):
    l_alpha: float
    l_one: float
    renyi_entropy: float
    gap: float


class VarianceBound(NamedTuple):
    gap: float
    bound: float
    holds: bool


class ShieldingRow(NamedTuple):
    grad_norm: float
    bound: float
    holds: bool


def dv_identity_from_scores(s, alpha: float) -> IdentityCheck:
    """Donsker-Varadhan value at the optimal tilt.

    The tilt density w = M * softmax(alpha * s) is taken relative to the
    uniform particle measure, so E_Q[f] = mean(f).
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    s = np.asarray(s, dtype=float)
    lhs = float(loss_from_scores(s, alpha)[0])
    log_w = alpha * s - logsumexp(alpha * s) + math.log(s.size)
    w = np.exp(log_w)
    rhs = float(-np.mean(w * s) + np.mean(w * log_w) / alpha)
    return IdentityCheck(lhs, rhs, abs(lhs - rhs))


def dv_identity_check(ensemble: ParticleEnsemble, cfg: AlphaConfig, point: DataPoint) -> IdentityCheck:
    return dv_identity_from_scores(score_matrix(ensemble, _as_batch(point))[:, 0], cfg.alpha)


def entropy_decomposition_from_scores(s, alpha: float) -> EntropyDecomposition:
    """l_alpha = l_1 - ((1 - alpha)/alpha) * H_alpha(w; Q) with w the alpha=1 density."""
    if alpha <= 0.0 or alpha >= 1.0:
        raise ValueError("decomposition undefined at endpoints")
    s = np.asarray(s, dtype=float)
    m = s.size
    l_alpha = float(loss_from_scores(s, alpha)[0])
    l_one = float(loss_from_scores(s, 1.0)[0])
    log_w = s - logsumexp(s) + math.log(m)
    h = (logsumexp(alpha * log_w) - math.log(m)) / (1.0 - alpha)
    rhs = l_one - (1.0 - alpha) / alpha * h
    return EntropyDecomposition(l_alpha, l_one, float(h), abs(l_alpha - rhs))


def entropy_decomposition_check(ensemble: ParticleEnsemble, point: DataPoint, alpha: float) -> EntropyDecomposition:
    return entropy_decomposition_from_scores(score_matrix(ensemble, _as_batch(point))[:, 0], alpha)


def variance_bound_from_scores(s, alpha: float, slack: float = 1e-12) -> VarianceBound:
    """l_0 - l_alpha >= Var_Q(p^alpha) / (2 alpha max(p)^(2 alpha))."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("likelihoods must be finite and positive")
    gap = float(loss_from_scores(s, 0.0)[0] - loss_from_scores(s, alpha)[0])
    # (p / max p)^alpha keeps the ratio finite for densities of any scale
    u = np.exp(alpha * (s - np.max(s)))
    bound = float(np.var(u) / (2.0 * alpha))
    return VarianceBound(gap, bound, gap >= bound - slack)


def variance_bound_check(ensemble: ParticleEnsemble, point: DataPoint, alpha: float) -> VarianceBound:
    return variance_bound_from_scores(score_matrix(ensemble, _as_batch(point))[:, 0], alpha)


def shielding_from_scores(s, grads, alpha: float, slack: float = 1e-12) -> list[ShieldingRow]:
    """Per-particle bound ||grad_i l_alpha|| <= exp(-alpha (L_i - L_min)) ||grad L_i||."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    s = np.asarray(s, dtype=float)
    grads = np.asarray(grads, dtype=float)
    w = softmax(alpha * s)
    raw = np.linalg.norm(grads, axis=1)
    gnorm = w * raw
    loss = -s
    bound = np.exp(-alpha * (loss - loss.min())) * raw
    return [ShieldingRow(float(g), float(b), bool(g <= b * (1.0 + slack) + slack)) for g, b in zip(gnorm, bound)]


def shielding_check(ensemble: ParticleEnsemble, cfg: AlphaConfig, point: DataPoint) -> list[ShieldingRow]:
    batch = _as_batch(point)
    return shielding_from_scores(score_matrix(ensemble, batch)[:, 0], score_gradients(ensemble, batch)[:, 0], cfg.alpha)


def cumulant_remainder(s, alpha: float) -> float:
    """|(l_0 - l_alpha) - (alpha/2) Var_Q(L)|, the error of the second-order cumulant expansion."""
    s = np.asarray(s, dtype=float)
    c = s - np.mean(s)
    # centred form of l_0 - l_alpha avoids cancelling two large terms
    gap = (logsumexp(alpha * c) - math.log(c.size)) / alpha
    return abs(gap - 0.5 * alpha * float(np.var(s)))
