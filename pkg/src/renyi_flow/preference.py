"""alpha-aggregated Bradley-Terry preference objective over a particle ensemble.

Policies are Gaussian low-rank-adapter maps; the frozen reference is the
same map with zero adapter update. Particle i scores a triple (x, y+, y-) by

    Delta_i = log p_i(y+|x) - log p_i(y-|x) - log p_ref(y+|x) + log p_ref(y-|x)
    r_i     = sigmoid(beta * Delta_i)

and the ensemble loss is the alpha-Renyi aggregate of the r_i.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .models import LowRankAdapterModel
from .numerics import make_rng
from .regularizers import PriorSpec, prior_potential
from .renyi_loss import ess, gradients_from_scores, loss_from_scores, weights_from_scores
from .trainer import AdamState, TrainerConfig, TrainTrace, adamw_step, minibatches


@dataclass(frozen=True)
class PreferenceTriple:
    x: np.ndarray
    y_plus: np.ndarray
    y_minus: np.ndarray


@dataclass(frozen=True)
class PreferenceData:
    """Stacked triples: X (N, d_in), Y_plus and Y_minus (N, d_out)."""

    X: np.ndarray
    Y_plus: np.ndarray
    Y_minus: np.ndarray

    def __post_init__(self):
        arrs = [np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.X, self.Y_plus, self.Y_minus)]
        if len({a.shape[0] for a in arrs}) != 1:
            raise ValueError("triple components must have equal length")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("preference data must be finite")
        for name, a in zip(("X", "Y_plus", "Y_minus"), arrs):
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, k) -> PreferenceTriple:
        return PreferenceTriple(self.X[k], self.Y_plus[k], self.Y_minus[k])

    def subset(self, idx) -> "PreferenceData":
        return PreferenceData(self.X[idx], self.Y_plus[idx], self.Y_minus[idx])

    def swapped(self) -> "PreferenceData":
        return PreferenceData(self.X, self.Y_minus, self.Y_plus)

    @classmethod
    def from_triples(cls, triples) -> "PreferenceData":
        triples = list(triples)
        return cls(np.stack([t.x for t in triples]), np.stack([t.y_plus for t in triples]),
                   np.stack([t.y_minus for t in triples]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{k}" for k in range(self.X.shape[1])]
                   + [f"yplus_{k}" for k in range(self.Y_plus.shape[1])]
                   + [f"yminus_{k}" for k in range(self.Y_minus.shape[1])])
        for row in np.hstack([self.X, self.Y_plus, self.Y_minus]):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def read_csv(cls, path) -> "PreferenceData":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])

        def cols(prefix):
            return [k for k, h in enumerate(header) if h.startswith(prefix)]

        return cls(body[:, cols("x_")], body[:, cols("yplus_")], body[:, cols("yminus_")])

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


@dataclass
class PreferenceEnsemble:
    model: LowRankAdapterModel
    params: np.ndarray
    beta: float = 0.1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        p = np.array(self.params, dtype=float)
        if p.ndim != 2 or p.shape[1] != self.model.param_dim:
            raise ValueError("params must have shape (M, param_dim)")
        self.params = p

    @property
    def M(self) -> int:
        return self.params.shape[0]


def _as_data(triples) -> PreferenceData:
    if isinstance(triples, PreferenceTriple):
        return PreferenceData(triples.x[None, :], triples.y_plus[None, :], triples.y_minus[None, :])
    return triples


def margins(ens: PreferenceEnsemble, data) -> np.ndarray:
    """Delta[i, b] for every particle and triple."""
    data = _as_data(data)
    mdl = ens.model
    ref = mdl.base_log_lik_batch(data.X, data.Y_plus) - mdl.base_log_lik_batch(data.X, data.Y_minus)
    out = np.empty((ens.M, len(data)))
    for i, th in enumerate(ens.params):
        out[i] = mdl.log_lik_batch(th, data.X, data.Y_plus) - mdl.log_lik_batch(th, data.X, data.Y_minus) - ref
    return out


def particle_margin(ens: PreferenceEnsemble, i: int, triple: PreferenceTriple) -> float:
    if not 0 <= i < ens.M:
        raise IndexError(f"particle index {i} out of range")
    sub = PreferenceEnsemble(ens.model, ens.params[i:i + 1], ens.beta)
    return float(margins(sub, triple)[0, 0])


def log_sigmoid(z) -> np.ndarray:
    """log(1 / (1 + exp(-z))) = -softplus(-z), stable for either sign."""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


def log_r(ens: PreferenceEnsemble, data) -> np.ndarray:
    return log_sigmoid(ens.beta * margins(ens, data))


def preference_loss(ens: PreferenceEnsemble, alpha: float, triple) -> float | np.ndarray:
    """alpha-aggregated preference loss of one triple (or a vector over a batch)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = loss_from_scores(log_r(ens, triple), alpha)
    return float(out[0]) if isinstance(triple, PreferenceTriple) else out


def preference_responsibilities(ens: PreferenceEnsemble, alpha: float, data):
    w = weights_from_scores(log_r(ens, data), alpha)
    return w, ess(w)


def minibatch_preference_loss(ens: PreferenceEnsemble, alpha: float, data, n_train: int) -> float:
    data = _as_data(data)
    return n_train / len(data) * float(np.sum(loss_from_scores(log_r(ens, data), alpha)))


def preference_gradients(ens: PreferenceEnsemble, alpha: float, data, n_train: int, batch_size=None) -> np.ndarray:
    """g_i = -(N/B) sum_b w_ib * beta * (1 - r_ib) * grad Delta_ib, shape (M, param_dim)."""
    data = _as_data(data)
    b = len(data) if batch_size is None else batch_size
    mdl = ens.model
    delta = margins(ens, data)
    lr = log_sigmoid(ens.beta * delta)
    w = weights_from_scores(lr, alpha)
    # 1 - r = sigmoid(-beta * Delta), taken from the log form for stability
    one_minus_r = np.exp(log_sigmoid(-ens.beta * delta))
    grads = np.empty((ens.M, len(data), mdl.param_dim))
    for i, th in enumerate(ens.params):
        gd = mdl.grad_log_lik_batch(th, data.X, data.Y_plus) - mdl.grad_log_lik_batch(th, data.X, data.Y_minus)
        grads[i] = (ens.beta * one_minus_r[i])[:, None] * gd
    return gradients_from_scores(w, grads, n_train / b)


class PreferenceRun(NamedTuple):
    ensemble: PreferenceEnsemble
    trace: TrainTrace


def train_preference(ens: PreferenceEnsemble, data: PreferenceData, alpha: float, lam: float,
                     cfg: TrainerConfig) -> PreferenceRun:
    """AdamW on (N/B) sum_b l_pref + R_prior / N, mirroring the supervised trainer."""
    if cfg.regularizer == "kde":
        raise ValueError("preference training supports the 'prior' and 'none' regularizers")
    n = len(data)
    prior = PriorSpec(cfg.prior_tau)
    params = ens.params.copy()
    state = AdamState.zeros_like(params)
    trace = TrainTrace()
    batches = minibatches(n, cfg.batch_size, make_rng(cfg.seed))
    for step in range(cfg.steps):
        idx = next(batches)
        cur = PreferenceEnsemble(ens.model, params, ens.beta)
        batch = data.subset(idx)
        lr = log_r(cur, batch)
        data_loss = n / len(batch) * float(np.sum(loss_from_scores(lr, alpha)))
        g = preference_gradients(cur, alpha, batch, n)
        if cfg.regularizer == "prior" and lam > 0:
            reg, rg = prior_potential(params, prior, lam)
        else:
            reg, rg = 0.0, np.zeros_like(params)
        e = ess(weights_from_scores(lr, alpha))
        trace.append(step=step, data_loss=data_loss, reg_value=reg, objective=data_loss + reg / n,
                     mean_ess=float(np.mean(e)), min_ess=float(np.min(e)))
        params, state = adamw_step(params, g + rg / n, state, cfg)
    return PreferenceRun(PreferenceEnsemble(ens.model, params, ens.beta), trace)


def sample_preference_conflict(n: int, d_in: int, d_out: int, separation: float, conflicting: bool,
                               rng: np.random.Generator):
    """Two preference subsets on the same inputs.

    Each input x carries responses y_a = W x + separation * e and
    y_b = W x - separation * e. Subset 0 prefers y_a; subset 1 repeats the
    same inputs and, when ``conflicting``, prefers y_b instead. Returns the
    data and the subset label of every row.
    """
    half = max(1, n // 2)
    x = rng.normal(size=(half, d_in))
    w_true = rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_out, d_in))
    e = rng.normal(size=(half, d_out))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    ya = x @ w_true.T + separation * e
    yb = x @ w_true.T - separation * e
    second_plus, second_minus = (yb, ya) if conflicting else (ya, yb)
    data = PreferenceData(np.vstack([x, x]), np.vstack([ya, second_plus]), np.vstack([yb, second_minus]))
    labels = np.repeat([0, 1], half)
    return data, labels
