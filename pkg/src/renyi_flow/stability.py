"""Local stability of concentrated posteriors.

Empirical curvature V = mean NLL Hessian and score outer-product J, the
critical alpha as the minimum generalized Rayleigh quotient u'Vu / u'Ju,
and closed-form quantities for the two-regime linear-Gaussian model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import ConditionalModel, Dataset, LinearGaussianTwoRegime, two_regime_features
from .numerics import check_symmetric, generalized_min_rayleigh, sym_eig
from .regularizers import PriorSpec

FD_HESSIAN_STEP = 1e-4


@dataclass
class StabilityReport:
    v_hat: np.ndarray
    j_hat: np.ndarray
    alpha_critical: float
    principal_direction: np.ndarray
    n_samples: int
    theta_eval: np.ndarray

    @property
    def in_unit_interval(self) -> bool:
        return 0.0 < self.alpha_critical <= 1.0

    def to_record(self) -> dict:
        return {
            "alpha_critical": self.alpha_critical,
            "alpha_critical_in_unit_interval": self.in_unit_interval,
            "direction": self.principal_direction.tolist(),
            "v_hat": self.v_hat.tolist(),
            "j_hat": self.j_hat.tolist(),
            "n_samples": self.n_samples,
            "theta_eval": self.theta_eval.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True) + "\n"


def _fd_hessians(model: ConditionalModel, theta, data: Dataset, step: float) -> np.ndarray:
    """Central differences of the score; returns NLL Hessians of shape (N, d, d)."""
    d = model.param_dim
    out = np.empty((len(data), d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        gp = model.grad_log_lik_batch(theta + e, data.X, data.Y)
        gm = model.grad_log_lik_batch(theta - e, data.X, data.Y)
        out[:, :, k] = -(gp - gm) / (2.0 * step)
    return out


def empirical_v_j(model: ConditionalModel, theta, dataset: Dataset):
    """(V_hat, J_hat) at ``theta``; Hessians fall back to finite differences of the score."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    theta = np.asarray(theta, dtype=float)
    n = len(dataset)
    h = model.hessian_nll_batch(theta, dataset.X, dataset.Y)
    if h is None:
        h = _fd_hessians(model, theta, dataset, FD_HESSIAN_STEP)
    v = np.sum(h, axis=0) / n
    g = model.grad_log_lik_batch(theta, dataset.X, dataset.Y)
    j = g.T @ g / n
    return 0.5 * (v + v.T), 0.5 * (j + j.T)


def prior_curvature_adjustment(v_hat, j_hat, prior: PriorSpec, lam: float, alpha: float = 0.0) -> np.ndarray:
    """V - alpha J + lam * Hess(-log prior); the Gaussian prior contributes I / tau^2.

    With the default ``alpha = 0`` this is the prior-adjusted curvature used
    in the numerator of the critical-alpha quotient.
    """
    v = check_symmetric(v_hat, "V")
    j = check_symmetric(j_hat, "J")
    return v - alpha * j + lam * np.eye(v.shape[0]) / prior.tau**2


def alpha_critical(v_hat, j_hat, prior: Optional[PriorSpec] = None, lam: float = 0.0):
    """Minimum of u'Vu / u'Ju (prior curvature added to V on request)."""
    v = check_symmetric(v_hat, "V")
    j = check_symmetric(j_hat, "J")
    if prior is not None and lam > 0:
        v = prior_curvature_adjustment(v, j, prior, lam)
    try:
        return generalized_min_rayleigh(v, j)
    except np.linalg.LinAlgError as exc:
        evals = np.linalg.eigvalsh(j)
        cond = np.inf if evals[0] <= 0 else evals[-1] / evals[0]
        raise np.linalg.LinAlgError(
            f"Fisher matrix singular: eigenvalues {evals.tolist()}, condition {cond:g}") from exc


def stability_report(model: ConditionalModel, theta, dataset: Dataset,
                     prior: Optional[PriorSpec] = None, lam: float = 0.0) -> StabilityReport:
    v, j = empirical_v_j(model, theta, dataset)
    a, u = alpha_critical(v, j, prior, lam)
    return StabilityReport(v, j, a, u, len(dataset), np.asarray(theta, dtype=float))


def two_regime_alpha_critical_closed_form(sigma: float, epsilon: float, a: float) -> float:
    """5 s^2 / (5 s^2 + 3 eps (1 - eps) a^2) for X ~ U[-1, 1]."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    s2 = sigma * sigma
    return 5.0 * s2 / (5.0 * s2 + 3.0 * epsilon * (1.0 - epsilon) * a * a)


def two_regime_population_v_j(sigma: float, epsilon: float, a: float):
    """Population V and J at the pseudo-true mean for X ~ U[-1, 1].

    E[phi phi'] = [[1/3, 1/6], [1/6, 1/6]] and E[X_+^2 phi phi'] = (1/10) * ones.
    """
    s2 = sigma * sigma
    e_pp = np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 6.0]])
    e_x4 = np.full((2, 2), 0.1)
    v = e_pp / s2
    j = v + epsilon * (1.0 - epsilon) * a * a / (s2 * s2) * e_x4
    return v, j


def _quad_form(phi: np.ndarray, sigma_mat: np.ndarray) -> np.ndarray:
    # explicit sum keeps zero blocks of Sigma exactly zero
    return (sigma_mat[0, 0] * (phi[:, 0] * phi[:, 0]) + 2.0 * sigma_mat[0, 1] * (phi[:, 0] * phi[:, 1])
            + sigma_mat[1, 1] * (phi[:, 1] * phi[:, 1]))


def two_regime_pointwise_loss(m, Sigma, alpha: float, sigma: float, x, y):
    """Closed-form alpha-loss of the Gaussian posterior N(m, Sigma); vectorized over x, y."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    sig = check_symmetric(Sigma, "Sigma")
    m = np.asarray(m, dtype=float)
    phi = two_regime_features(x)
    y = np.asarray(y, dtype=float).reshape(-1)
    v = _quad_form(phi, sig)
    s2 = sigma * sigma
    r = y - phi @ m
    out = 0.5 * math.log(2 * math.pi * s2) + np.log1p(alpha * v / s2) / (2.0 * alpha) + r * r / (2.0 * (s2 + alpha * v))
    return float(out[0]) if out.size == 1 else out


@dataclass
class ExpansionCheck:
    exact_delta: float
    predicted_delta: float
    rel_err: float


def local_expansion_check(model: LinearGaussianTwoRegime, theta, s: float, U, alpha: float,
                          dataset: Dataset) -> ExpansionCheck:
    """Compare the exact mean risk change of N(theta, s^2 U) vs a Dirac at theta with 0.5 Tr((V - alpha J) Sigma)."""
    U = check_symmetric(U, "U")
    sig = s * s * U
    x, y = dataset.X[:, 0], dataset.Y[:, 0]
    base = two_regime_pointwise_loss(theta, np.zeros((2, 2)), alpha, model.sigma, x, y)
    spread = two_regime_pointwise_loss(theta, sig, alpha, model.sigma, x, y)
    exact = float(np.mean(spread - base))
    v, j = empirical_v_j(model, theta, dataset)
    pred = 0.5 * float(np.trace((v - alpha * j) @ sig))
    if pred == 0.0:
        rel = 0.0 if exact == 0.0 else math.inf
    else:
        rel = abs(exact - pred) / abs(pred)
    return ExpansionCheck(exact, pred, rel)


def epistemic_variance_profile(m, Sigma, xs, sigma: float):
    """Rows (x, total predictive variance, epistemic part phi(x)' Sigma phi(x)).

    ``m`` does not enter the variances; it is accepted for a uniform
    posterior signature.
    """
    sig = check_symmetric(Sigma, "Sigma")
    xs = np.asarray(xs, dtype=float).reshape(-1)
    epi = _quad_form(two_regime_features(xs), sig)
    return [(float(x), sigma * sigma + float(e), float(e)) for x, e in zip(xs, epi)]


def stability_spectrum(v_hat, j_hat, alpha: float):
    """Eigenvalues (ascending) and eigenvectors of V - alpha J."""
    return sym_eig(check_symmetric(v_hat) - alpha * check_symmetric(j_hat))
