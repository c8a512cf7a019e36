"""Self-consistent alpha-posterior on a finite parameter set.

The minimiser of the alpha-Renyi objective over a finite table satisfies

    q(theta) ∝ prior(theta) * exp( (1/(lam*alpha)) * sum_i w_i(theta; q) ),
    w_i(theta; q) = p_theta(z_i)^alpha / sum_t q(t) p_t(z_i)^alpha,

which is solved here by damped fixed-point iteration.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .models import DiscreteTable
from .numerics import logsumexp, softmax

SWEEP_COLUMNS = ("alpha", "q_g", "q_a", "q_b", "ratio_specialist_generalist")


@dataclass(frozen=True)
class FixedPointConfig:
    damping: float = 0.5
    tol: float = 1e-10
    max_iters: int = 100_000

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


class DiscretePosterior(NamedTuple):
    probs: np.ndarray
    labels: tuple

    def __getitem__(self, label):  # type: ignore[override]
        if isinstance(label, int):
            return tuple.__getitem__(self, label)
        return float(self.probs[self.labels.index(label)])


class FixedPointResult(NamedTuple):
    posterior: DiscretePosterior
    iterations: int
    converged: bool


def _log_prior(prior, k: int) -> np.ndarray:
    if prior is None:
        return np.full(k, -math.log(k))
    p = np.asarray(prior, dtype=float)
    if p.shape != (k,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
        raise ValueError("prior must be a probability vector over the labels")
    with np.errstate(divide="ignore"):
        return np.log(p)


def self_consistency_map(q, log_table: np.ndarray, alpha: float, lam: float, log_prior: np.ndarray) -> np.ndarray:
    """One application of the (undamped) self-consistency map."""
    powered = np.exp(alpha * (log_table - np.max(log_table, axis=0)))  # (K, N), column-rescaled p^alpha
    denom = q @ powered  # (N,)
    resp = np.sum(powered / denom, axis=1)  # sum_i w_i(theta; q)
    return softmax(log_prior + resp / (lam * alpha))


def fixed_point_residual(q, table: DiscreteTable, alpha: float, lam: float, prior=None) -> float:
    q = np.asarray(q, dtype=float)
    return float(np.max(np.abs(self_consistency_map(q, table.log_table(), alpha, lam, _log_prior(prior, table.K)) - q)))


def solve_self_consistent(table: DiscreteTable, alpha: float, lam: float, prior=None,
                          cfg: FixedPointConfig = FixedPointConfig(), init=None) -> FixedPointResult:
    """Damped iteration q <- (1 - eta) q + eta F(q) until max |dq| < tol.

    The column rescaling of p^alpha inside the map cancels between numerator
    and denominator of each responsibility, so it only guards against underflow.
    """
    if not alpha > 0 or not lam > 0:
        raise ValueError("alpha and lambda must be positive")
    k = table.K
    log_prior = _log_prior(prior, k)
    log_table = table.log_table()
    if init is None:
        q = np.exp(log_prior) if prior is not None else np.full(k, 1.0 / k)
    else:
        q = np.asarray(init, dtype=float)
        q = q / q.sum()
    eta = cfg.damping
    for it in range(1, cfg.max_iters + 1):
        new = (1.0 - eta) * q + eta * self_consistency_map(q, log_table, alpha, lam, log_prior)
        new /= new.sum()
        delta = float(np.max(np.abs(new - q)))
        q = new
        if delta < cfg.tol:
            return FixedPointResult(DiscretePosterior(q, table.labels), it, True)
    return FixedPointResult(DiscretePosterior(q, table.labels), cfg.max_iters, False)


def gibbs_posterior(table: DiscreteTable, lam: float, prior=None) -> DiscretePosterior:
    """q(theta) ∝ prior(theta) * exp((1/lam) * sum_i log p_theta(z_i))."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    logits = _log_prior(prior, table.K) + np.sum(table.log_table(), axis=1) / lam
    return DiscretePosterior(softmax(logits), table.labels)


def analytic_crossing(h: float, eps: float, m: float, lo: float = 1e-4, hi: float = 1.0, tol: float = 1e-6) -> float:
    """Root of h^a + eps^a - 2 m^a on [lo, hi] by bisection."""

    def f(a):
        return h**a + eps**a - 2.0 * m**a

    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise ValueError("no sign change of h^a + eps^a - 2 m^a on the bracket")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (fhi > 0):
            hi, fhi = mid, fm
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


class SweepResult(NamedTuple):
    rows: list  # (alpha, q_g, q_a, q_b, ratio)
    fixed_point_crossing: Optional[float]
    analytic_crossing: Optional[float]
    all_converged: bool

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([repr(float(v)) for v in r])
        return buf.getvalue()


def specialist_transition_sweep(h: float, eps: float, m: float, lam: float, alphas: Sequence[float],
                              cfg: FixedPointConfig = FixedPointConfig(), crossing_tol: float = 1e-6) -> SweepResult:
    """Specialist/generalist mass ratio across an alpha grid and both crossing estimates."""
    table = DiscreteTable.specialist_generalist(h, eps, m)
    rows = []
    ok = True

    def margin(alpha):
        nonlocal ok
        res = solve_self_consistent(table, alpha, lam, cfg=cfg)
        ok = ok and res.converged
        q = res.posterior.probs
        return q, q[1] - q[0]

    signs = []
    for a in alphas:
        q, diff = margin(float(a))
        rows.append((float(a), q[0], q[1], q[2], q[1] / q[0]))
        signs.append(diff > 0)

    fp_cross = None
    for k in range(len(rows) - 1):
        if signs[k] != signs[k + 1]:
            lo, hi = rows[k][0], rows[k + 1][0]
            hi_sign = signs[k + 1]
            while hi - lo > crossing_tol:
                mid = 0.5 * (lo + hi)
                if (margin(mid)[1] > 0) == hi_sign:
                    hi = mid
                else:
                    lo = mid
            fp_cross = 0.5 * (lo + hi)
            break
    try:
        an = analytic_crossing(h, eps, m)
    except ValueError:
        an = None
    return SweepResult(rows, fp_cross, an, ok)


def total_variation(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def log_normaliser(logits) -> float:
    return logsumexp(logits)
