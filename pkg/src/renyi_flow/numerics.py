"""Small dense numerical kernel.

Stable log-sum-exp, a cyclic Jacobi eigensolver for small symmetric
matrices, the generalized minimum Rayleigh quotient, and seeded random
number generation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

__all__ = [
    "logsumexp",
    "softmax",
    "check_symmetric",
    "sym_eig",
    "cholesky",
    "generalized_min_rayleigh",
    "make_rng",
    "worker_count",
    "ordered_map",
    "spawn_rngs",
]

SYM_RTOL = 1e-12
MAX_JACOBI_DIM = 64

T = TypeVar("T")


def logsumexp(values, axis=None):
    """log(sum(exp(values))) computed by shifting with the maximum.

    Entries may be -inf; +inf and NaN are rejected.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty reduction")
    if np.isnan(v).any() or np.isposinf(v).any():
        raise ValueError("logsumexp input contains NaN or +inf")
    vmax = np.max(v, axis=axis, keepdims=True)
    # all -inf along the reduction: result is -inf, avoid (-inf) - (-inf)
    shift = np.where(np.isneginf(vmax), 0.0, vmax)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(values, axis=0):
    """Max-shifted softmax; exact ties give exactly equal weights."""
    v = np.asarray(values, dtype=float)
    vmax = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - vmax)
    return e / np.sum(e, axis=axis, keepdims=True)


def check_symmetric(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    tol = SYM_RTOL * np.maximum(1.0, np.abs(a))
    if np.any(np.abs(a - a.T) > tol):
        raise ValueError(f"{name} is not symmetric")
    return 0.5 * (a + a.T)


def sym_eig(a, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as the columns of an orthonormal matrix.
    """
    a = check_symmetric(a)
    n = a.shape[0]
    if n > MAX_JACOBI_DIM:
        raise ValueError(f"dimension {n} exceeds Jacobi limit {MAX_JACOBI_DIM}")
    a = a.copy()
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        # summed directly; norm^2 - diag^2 would cancel catastrophically
        off = float(np.linalg.norm(a[~np.eye(n, dtype=bool)]))
        if off < tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    a[p, q] = a[q, p] = 0.0
                    continue
                # Rutishauser's stable rotation angle
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi eigensolver did not converge")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor; raises ``np.linalg.LinAlgError`` if not positive definite."""
    return np.linalg.cholesky(check_symmetric(a))


def generalized_min_rayleigh(v, j):
    """min_u (u'Vu)/(u'Ju) for symmetric V and symmetric positive definite J.

    Reduces to a standard problem through J = LL' and returns the smallest
    eigenvalue of L^-1 V L^-T together with the back-transformed minimizer,
    normalized to unit length (sign fixed so the largest entry is positive).
    """
    v = check_symmetric(v, "V")
    j = check_symmetric(j, "J")
    if v.shape != j.shape:
        raise ValueError("V and J must have equal shape")
    try:
        chol = np.linalg.cholesky(j)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Fisher matrix singular") from exc
    linv = np.linalg.solve(chol, np.eye(j.shape[0]))
    reduced = linv @ v @ linv.T
    evals, evecs = sym_eig(0.5 * (reduced + reduced.T))
    u = linv.T @ evecs[:, 0]
    u /= np.linalg.norm(u)
    if u[np.argmax(np.abs(u))] < 0:
        u = -u
    return float(evals[0]), u


def make_rng(seed: int) -> np.random.Generator:
    """A PCG64 stream; identical seeds give identical streams on every platform."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def worker_count() -> int:
    raw = os.environ.get("RENYI_FLOW_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"RENYI_FLOW_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def ordered_map(fn: Callable[[T], np.ndarray], items: Sequence[T]) -> list:
    """Map ``fn`` over ``items`` on up to ``worker_count()`` threads, preserving order."""
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def spawn_rngs(seed: int, n: int) -> list:
    """``n`` independent PCG64 streams derived from one seed."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]
