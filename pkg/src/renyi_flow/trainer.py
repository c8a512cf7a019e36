"""Minibatched AdamW training of a particle ensemble under the alpha-Renyi objective.

Objective per step: ``J = L_data + R / N`` where ``L_data`` is the
``N / B``-scaled minibatch loss and ``R`` the chosen regularizer.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .models import ConditionalModel, Dataset
from .numerics import make_rng
from .regularizers import KdeSpec, PriorSpec, kde_kl, prior_potential
from .renyi_loss import (
    AlphaConfig,
    ParticleEnsemble,
    UnsupportedExampleError,
    ess,
    gradients_from_scores,
    loss_from_scores,
    score_gradients,
    score_matrix,
    weights_from_scores,
)

TRACE_COLUMNS = ("step", "data_loss", "reg_value", "objective", "mean_ess", "min_ess")


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    regularizer: str = "prior"
    prior_tau: float = 1.0
    kde_bandwidth: object = "median"
    seed: int = 0
    init_spread: float = 0.1

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.regularizer not in ("prior", "kde", "none"):
            raise ValueError("regularizer must be one of 'prior', 'kde', 'none'")
        if self.init_spread < 0:
            raise ValueError("init_spread must be non-negative")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params, dtype=float), np.zeros_like(params, dtype=float), 0)


def adamw_step(params, grads, state: AdamState, cfg: TrainerConfig):
    """One AdamW update with decoupled weight decay.

    Moments are element-wise, so each particle row keeps its own state.
    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes must match")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads * grads
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    new = params * (1.0 - cfg.learning_rate * cfg.weight_decay)
    new = new - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new, AdamState(m, v, t)


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, **row) -> None:
        self.rows.append(tuple(row[c] for c in TRACE_COLUMNS))

    def column(self, name: str) -> np.ndarray:
        k = TRACE_COLUMNS.index(name)
        return np.array([r[k] for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
        return buf.getvalue()


def init_ensemble(model: ConditionalModel, M: int, init_spread: float, rng: np.random.Generator) -> ParticleEnsemble:
    """One shared base draw plus independent N(0, init_spread^2) perturbations per particle."""
    if M < 1:
        raise ValueError("M must be at least 1")
    base = model.init_params(rng)
    noise = rng.normal(size=(M, model.param_dim))
    return ParticleEnsemble(model, base[None, :] + init_spread * noise)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches: without replacement within an epoch, reshuffled per epoch."""
    b = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - b + 1, b):
            yield perm[start:start + b]


def regularizer_value_grad(params, cfg: TrainerConfig, lam: float):
    if cfg.regularizer == "none" or lam == 0.0:
        return 0.0, np.zeros_like(params)
    prior = PriorSpec(cfg.prior_tau)
    if cfg.regularizer == "prior":
        return prior_potential(params, prior, lam)
    return kde_kl(params, prior, KdeSpec(cfg.kde_bandwidth), lam)


def objective_and_gradients(ensemble: ParticleEnsemble, batch: Dataset, alpha_cfg: AlphaConfig,
                            cfg: TrainerConfig, batch_index: Optional[np.ndarray] = None):
    """Return (data_loss, reg_value, objective, grads, ess_vector) for one minibatch."""
    s = score_matrix(ensemble, batch)
    try:
        losses = loss_from_scores(s, alpha_cfg.alpha)
    except UnsupportedExampleError as exc:
        idx = exc.index if batch_index is None else int(batch_index[exc.index])
        raise UnsupportedExampleError(idx) from None
    scale = alpha_cfg.n_train / len(batch)
    data_loss = scale * float(np.sum(losses))
    w = weights_from_scores(s, alpha_cfg.alpha)
    g = gradients_from_scores(w, score_gradients(ensemble, batch), scale)
    reg, reg_g = regularizer_value_grad(ensemble.params, cfg, alpha_cfg.lam)
    n = alpha_cfg.n_train
    return data_loss, reg, data_loss + reg / n, g + reg_g / n, ess(w)


def train(model: ConditionalModel, dataset: Dataset, ensemble_init: ParticleEnsemble,
          alpha_cfg: AlphaConfig, cfg: TrainerConfig):
    """Run exactly ``cfg.steps`` AdamW steps; returns (final ensemble, trace).

    Trace rows record the objective of the minibatch *before* each update.
    """
    if ensemble_init.model is not model:
        raise ValueError("ensemble must be built on the given model")
    if alpha_cfg.n_train != len(dataset):
        alpha_cfg = AlphaConfig(alpha_cfg.alpha, alpha_cfg.lam, len(dataset))
    ensemble = ensemble_init.copy()
    trace = TrainTrace(metadata={
        "weight_decay_with_prior": bool(cfg.weight_decay > 0 and cfg.regularizer != "none" and alpha_cfg.lam > 0),
    })
    rng = make_rng(cfg.seed)
    batches = minibatches(len(dataset), cfg.batch_size, rng)
    state = AdamState.zeros_like(ensemble.params)
    for step in range(cfg.steps):
        idx = next(batches)
        data_loss, reg, obj, grads, e = objective_and_gradients(ensemble, dataset.subset(idx), alpha_cfg, cfg, idx)
        trace.append(step=step, data_loss=data_loss, reg_value=reg, objective=obj,
                     mean_ess=float(np.mean(e)), min_ess=float(np.min(e)))
        new_params, state = adamw_step(ensemble.params, grads, state, cfg)
        if not np.all(np.isfinite(new_params)):
            raise FloatingPointError(f"non-finite parameters after step {step}")
        ensemble.params = new_params
    return ensemble, trace


def full_objective(ensemble: ParticleEnsemble, dataset: Dataset, alpha_cfg: AlphaConfig, cfg: TrainerConfig) -> float:
    alpha_cfg = AlphaConfig(alpha_cfg.alpha, alpha_cfg.lam, len(dataset))
    return objective_and_gradients(ensemble, dataset, alpha_cfg, cfg)[2]

