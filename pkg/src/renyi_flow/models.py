"""Conditional likelihood families p_theta(y | x).

Every model works on a flat parameter vector and exposes batched
log-likelihoods and scores (``*_batch``) alongside the single-point forms.
``hessian_nll`` returns ``None`` when no analytic Hessian is available.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DataPoint:
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def of(cls, x, y) -> "DataPoint":
        return cls(np.atleast_1d(np.asarray(x, dtype=float)), np.atleast_1d(np.asarray(y, dtype=float)))


@dataclass(frozen=True)
class Dataset:
    """Inputs ``X`` of shape (N, d_x) and outputs ``Y`` of shape (N, d_y)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.shape[0] != Y.shape[0]:
            raise ValueError("X and Y must have the same number of rows")
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one point")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, idx) -> DataPoint:
        return DataPoint(self.X[idx], self.Y[idx])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.Y[idx])

    @classmethod
    def from_points(cls, points: Sequence[DataPoint]) -> "Dataset":
        return cls(np.stack([p.x for p in points]), np.stack([p.y for p in points]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{k}" for k in range(self.X.shape[1])] + [f"y_{k}" for k in range(self.Y.shape[1])])
        for x, y in zip(self.X, self.Y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        xcols = [k for k, h in enumerate(header) if h.startswith("x_")]
        ycols = [k for k, h in enumerate(header) if h.startswith("y_")]
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
        return cls(data[:, xcols], data[:, ycols])


def _as_batch(X, Y):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    return X, Y


class ConditionalModel:
    """Base class; subclasses implement the batched methods."""

    param_dim: int

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_dim,):
            raise ValueError(f"expected parameter of length {self.param_dim}, got shape {theta.shape}")
        return theta

    def log_lik_batch(self, theta, X, Y) -> np.ndarray:
        raise NotImplementedError

    def grad_log_lik_batch(self, theta, X, Y) -> np.ndarray:
        raise NotImplementedError

    def hessian_nll_batch(self, theta, X, Y) -> Optional[np.ndarray]:
        return None

    def log_lik(self, theta, point: DataPoint) -> float:
        return float(self.log_lik_batch(theta, point.x[None, :], point.y[None, :])[0])

    def grad_log_lik(self, theta, point: DataPoint) -> np.ndarray:
        return self.grad_log_lik_batch(theta, point.x[None, :], point.y[None, :])[0]

    def hessian_nll(self, theta, point: DataPoint) -> Optional[np.ndarray]:
        h = self.hessian_nll_batch(theta, point.x[None, :], point.y[None, :])
        return None if h is None else h[0]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(size=self.param_dim)


def two_regime_features(x) -> np.ndarray:
    """phi(x) = (x, max(x, 0)) for scalar inputs; accepts shape (N,) or (N, 1)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.stack([x, np.maximum(x, 0.0)], axis=1)


class LinearGaussianTwoRegime(ConditionalModel):
    """y | x ~ N(phi(x)'theta, sigma^2) with phi(x) = (x, x_+)."""

    param_dim = 2

    def __init__(self, sigma: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)

    def residuals(self, theta, X, Y):
        phi = two_regime_features(X[:, 0])
        return Y[:, 0] - phi @ theta, phi

    def log_lik_batch(self, theta, X, Y):
        theta = self._check(theta)
        X, Y = _as_batch(X, Y)
        r, _ = self.residuals(theta, X, Y)
        s2 = self.sigma**2
        return -0.5 * r * r / s2 - 0.5 * (LOG_2PI + math.log(s2))

    def grad_log_lik_batch(self, theta, X, Y):
        theta = self._check(theta)
        X, Y = _as_batch(X, Y)
        r, phi = self.residuals(theta, X, Y)
        return (r / self.sigma**2)[:, None] * phi

    def hessian_nll_batch(self, theta, X, Y):
        self._check(theta)
        X, Y = _as_batch(X, Y)
        phi = two_regime_features(X[:, 0])
        return phi[:, :, None] * phi[:, None, :] / self.sigma**2

    def least_squares(self, data: Dataset, ridge: float = 0.0) -> np.ndarray:
        """Closed-form (ridge) least-squares / Gaussian MLE for this feature map."""
        phi = two_regime_features(data.X[:, 0])
        a = phi.T @ phi + ridge * np.eye(2)
        return np.linalg.solve(a, phi.T @ data.Y[:, 0])


class LowRankAdapterModel(ConditionalModel):
    """Gaussian linear map with a frozen base and a low-rank update.

    y | x ~ N((W0 + A B') x, sigma^2 I). The parameter vector is
    ``concat(A.ravel(), B.ravel())`` with A of shape (d_out, r) and B of
    shape (d_in, r).
    """

    def __init__(self, w0, rank: int, sigma: float):
        w0 = np.asarray(w0, dtype=float)
        if w0.ndim != 2:
            raise ValueError("W0 must be a matrix")
        d_out, d_in = w0.shape
        if not 1 <= rank <= min(d_out, d_in):
            raise ValueError("rank must satisfy 1 <= r <= min(d_out, d_in)")
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.w0 = w0
        self.d_out, self.d_in, self.rank = d_out, d_in, int(rank)
        self.sigma = float(sigma)
        self.param_dim = (d_out + d_in) * self.rank

    def split(self, theta):
        theta = self._check(theta)
        na = self.d_out * self.rank
        return theta[:na].reshape(self.d_out, self.rank), theta[na:].reshape(self.d_in, self.rank)

    def weight(self, theta) -> np.ndarray:
        a, b = self.split(theta)
        return self.w0 + a @ b.T

    def _norm_const(self) -> float:
        return -0.5 * self.d_out * (LOG_2PI + 2.0 * math.log(self.sigma))

    def log_lik_batch(self, theta, X, Y):
        X, Y = _as_batch(X, Y)
        r = Y - X @ self.weight(theta).T
        return -0.5 * np.sum(r * r, axis=1) / self.sigma**2 + self._norm_const()

    def base_log_lik_batch(self, X, Y):
        X, Y = _as_batch(X, Y)
        r = Y - X @ self.w0.T
        return -0.5 * np.sum(r * r, axis=1) / self.sigma**2 + self._norm_const()

    def grad_log_lik_batch(self, theta, X, Y):
        X, Y = _as_batch(X, Y)
        a, b = self.split(theta)
        r = (Y - X @ (self.w0 + a @ b.T).T) / self.sigma**2  # (N, d_out)
        u = X @ b  # (N, r) = B'x per row
        ga = r[:, :, None] * u[:, None, :]  # (N, d_out, r)
        gb = X[:, :, None] * (r @ a)[:, None, :]  # (N, d_in, r)
        n = X.shape[0]
        return np.concatenate([ga.reshape(n, -1), gb.reshape(n, -1)], axis=1)

    def hessian_nll_batch(self, theta, X, Y):
        X, Y = _as_batch(X, Y)
        a, b = self.split(theta)
        s2 = self.sigma**2
        n, r, dout, din = X.shape[0], self.rank, self.d_out, self.d_in
        na = dout * r
        res = Y - X @ (self.w0 + a @ b.T).T
        u = X @ b
        # Jacobian of the mean f = W0 x + A B'x: df_k/dA_kj = u_j, df_k/dB_lj = A_kj x_l
        jac = np.zeros((n, dout, self.param_dim))
        for k in range(dout):
            jac[:, k, k * r:(k + 1) * r] = u
            jac[:, k, na:] = (X[:, :, None] * a[k][None, None, :]).reshape(n, -1)
        h = np.einsum("nkp,nkq->npq", jac, jac) / s2
        # curvature of the mean: d2 f_k / dA_kj dB_lj = x_l, weighted by -res_k
        cross = np.zeros((n, na, din * r))
        for k in range(dout):
            for j in range(r):
                cross[:, k * r + j, j::r] = -res[:, k:k + 1] * X / s2
        h[:, :na, na:] += cross
        h[:, na:, :na] += np.transpose(cross, (0, 2, 1))
        return h

    def init_params(self, rng):
        a = rng.normal(scale=1.0 / math.sqrt(self.rank), size=(self.d_out, self.rank))
        b = rng.normal(scale=1.0 / math.sqrt(self.d_in), size=(self.d_in, self.rank))
        return np.concatenate([a.ravel(), b.ravel()])


class TinyMlp(ConditionalModel):
    """One tanh hidden layer of width H and a Gaussian output head with fixed sigma.

    Parameter layout: W1 (H, d_in), b1 (H), W2 (d_out, H), b2 (d_out).
    """

    def __init__(self, d_in: int, hidden: int, d_out: int, sigma: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.d_in, self.hidden, self.d_out = int(d_in), int(hidden), int(d_out)
        self.sigma = float(sigma)
        self.param_dim = hidden * (d_in + d_out) + hidden + d_out

    def unpack(self, theta):
        theta = self._check(theta)
        h, di, do = self.hidden, self.d_in, self.d_out
        i = 0
        w1 = theta[i:i + h * di].reshape(h, di)
        i += h * di
        b1 = theta[i:i + h]
        i += h
        w2 = theta[i:i + do * h].reshape(do, h)
        i += do * h
        b2 = theta[i:i + do]
        return w1, b1, w2, b2

    def _forward(self, theta, X):
        w1, b1, w2, b2 = self.unpack(theta)
        hid = np.tanh(X @ w1.T + b1)
        return hid, hid @ w2.T + b2

    def log_lik_batch(self, theta, X, Y):
        X, Y = _as_batch(X, Y)
        _, mean = self._forward(theta, X)
        r = Y - mean
        return -0.5 * np.sum(r * r, axis=1) / self.sigma**2 - 0.5 * self.d_out * (LOG_2PI + 2.0 * math.log(self.sigma))

    def grad_log_lik_batch(self, theta, X, Y):
        X, Y = _as_batch(X, Y)
        w1, b1, w2, b2 = self.unpack(theta)
        hid, mean = self._forward(theta, X)
        r = (Y - mean) / self.sigma**2  # d loglik / d mean
        n = X.shape[0]
        g_w2 = r[:, :, None] * hid[:, None, :]
        g_b2 = r
        dpre = (r @ w2) * (1.0 - hid * hid)
        g_w1 = dpre[:, :, None] * X[:, None, :]
        g_b1 = dpre
        return np.concatenate([g_w1.reshape(n, -1), g_b1, g_w2.reshape(n, -1), g_b2], axis=1)

    def init_params(self, rng):
        h, di, do = self.hidden, self.d_in, self.d_out
        w1 = rng.normal(scale=1.0 / math.sqrt(di), size=(h, di))
        b1 = rng.normal(scale=1.0 / math.sqrt(di), size=h)
        w2 = rng.normal(scale=1.0 / math.sqrt(h), size=(do, h))
        b2 = rng.normal(scale=1.0 / math.sqrt(h), size=do)
        return np.concatenate([w1.ravel(), b1, w2.ravel(), b2])


@dataclass(frozen=True)
class DiscreteTable:
    """Finite parameter set with a K x N likelihood table (rows: labels, columns: observations)."""

    labels: tuple
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 2 or t.shape[0] != len(self.labels):
            raise ValueError("table must have one row per label")
        if np.any(t <= 0.0) or np.any(t > 1.0):
            raise ValueError("likelihood table entries must lie in (0, 1]")
        object.__setattr__(self, "table", t)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def K(self) -> int:
        return self.table.shape[0]

    @property
    def N(self) -> int:
        return self.table.shape[1]

    def index(self, label) -> int:
        return self.labels.index(label)

    def log_lik(self, label, obs: int) -> float:
        return math.log(self.table[self.index(label), obs])

    def log_table(self) -> np.ndarray:
        return np.log(self.table)

    @classmethod
    def specialist_generalist(cls, h: float = 0.9, eps: float = 0.01, m: float = 0.3) -> "DiscreteTable":
        """Generalist g and specialists a, b on two observations."""
        if not 0 < eps < m < h < 1:
            raise ValueError("require 0 < eps < m < h < 1")
        return cls(("g", "a", "b"), np.array([[m, m], [h, eps], [eps, h]]))


def sample_two_regime(n: int, beta: float, a: float, epsilon: float, sigma: float,
                      rng: np.random.Generator) -> Dataset:
    """X ~ U[-1, 1]; clean slope beta on x < 0, contaminated mixture on x >= 0."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if n < 1:
        raise ValueError("n must be at least 1")
    x = rng.uniform(-1.0, 1.0, size=n)
    contaminated = (x >= 0.0) & (rng.uniform(size=n) < epsilon)
    slope = np.where(contaminated, beta + a, beta)
    y = slope * x + sigma * rng.normal(size=n)
    return Dataset(x[:, None], y[:, None])


def sample_linear(n: int, beta: float, sigma: float, rng: np.random.Generator) -> Dataset:
    """Well-specified data for the two-regime model with theta* = (beta, 0)."""
    x = rng.uniform(-1.0, 1.0, size=n)
    y = beta * x + sigma * rng.normal(size=n)
    return Dataset(x[:, None], y[:, None])


def sample_conflict(n: int, beta: float, shift: float, sigma: float, rng: np.random.Generator):
    """Two incompatible slope clusters on the same inputs: y = (beta +/- shift) x + noise.

    Returns the dataset and the cluster label (0 or 1) of each row.
    """
    x = rng.uniform(-1.0, 1.0, size=n)
    labels = np.arange(n) % 2
    slope = np.where(labels == 0, beta + shift, beta - shift)
    y = slope * x + sigma * rng.normal(size=n)
    return Dataset(x[:, None], y[:, None]), labels


def sample_poisoned(n: int, beta: float, sigma: float, fraction: float, shift: float,
                    rng: np.random.Generator):
    """Clean well-specified data with a fraction of labels shifted by ``shift``.

    Returns the dataset and a boolean mask of poisoned rows.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("poison fraction must lie in [0, 1)")
    data = sample_linear(n, beta, sigma, rng)
    n_poison = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if n_poison:
        mask[rng.choice(n, size=n_poison, replace=False)] = True
    y = data.Y[:, 0] + np.where(mask, shift, 0.0)
    return Dataset(data.X, y[:, None]), mask
