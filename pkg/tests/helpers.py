"""Shared test oracles."""

import math

import numpy as np
from scipy import special

FD_STEP = 1e-5
FD_RTOL = 1e-4


def central_diff(f, x, h=FD_STEP):
    """Central-difference gradient of a scalar function of an array (any shape)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def chi_mean(k):
    """E||z|| for z ~ N(0, I_k)."""
    return math.sqrt(2.0) * math.exp(special.gammaln((k + 1) / 2) - special.gammaln(k / 2))


def mixture_loss(p, alpha):
    """Direct alpha-loss from likelihoods, no log-space tricks."""
    p = np.asarray(p, dtype=float)
    if alpha == 0:
        return float(-np.mean(np.log(p)))
    return float(-np.log(np.mean(p**alpha)) / alpha)
