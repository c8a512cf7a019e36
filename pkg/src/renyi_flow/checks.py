"""Seeded oracle suites for the exact identities and inequalities of the loss.

Each suite draws random particle score vectors (and gradients where
needed), evaluates one property per instance and records the seeds of the
failing instances. ``loss_fn`` is injectable so that a deliberately broken
loss can be shown to fail the harness.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import make_rng
from .renyi_loss import (
    cumulant_remainder,
    dv_identity_from_scores,
    entropy_decomposition_from_scores,
    loss_from_scores,
    shielding_from_scores,
    variance_bound_from_scores,
)

IDENTITY_TOL = 1e-10
INEQUALITY_SLACK = 1e-12
CUMULANT_RATIO_RANGE = (0.005, 0.02)
SUITE_COLUMNS = ("suite", "instances", "failures", "worst", "passed")


@dataclass
class SuiteResult:
    name: str
    instances: int = 0
    failures: list = field(default_factory=list)
    worst: float = 0.0

    @property
    def passed(self) -> bool:
        return self.instances > 0 and not self.failures

    def record(self, seed: int, ok: bool, value: float) -> None:
        self.instances += 1
        if not np.isfinite(value) or value > self.worst:
            self.worst = float(value)
        if not ok:
            self.failures.append(int(seed))

    def to_record(self) -> dict:
        return {"instances": self.instances, "failures": len(self.failures), "failing_seeds": self.failures,
                "worst": self.worst, "passed": self.passed}


def _scalar_loss(loss_fn, s, alpha):
    return float(np.asarray(loss_fn(s, alpha)).reshape(-1)[0])


def random_scores(rng: np.random.Generator, m_min: int = 1, m_max: int = 8) -> np.ndarray:
    """Particle log-likelihoods with a random location and spread."""
    m = int(rng.integers(m_min, m_max + 1))
    scale = float(rng.uniform(0.05, 4.0))
    return float(rng.normal(scale=3.0)) + scale * rng.normal(size=m)


def _instances(seed: int, suite: int, n: int):
    # one independent, reproducible stream per instance
    base = make_rng(seed)
    seeds = base.integers(0, 2**63, size=(suite + 1, n))[suite]
    for s in seeds:
        yield int(s), make_rng(int(s))


def dv_suite(seed: int, n: int = 500, loss_fn: Callable = loss_from_scores) -> SuiteResult:
    res = SuiteResult("dv_identity")
    for inst, rng in _instances(seed, 0, n):
        s = random_scores(rng)
        alpha = float(rng.uniform(1e-3, 1.0))
        rhs = dv_identity_from_scores(s, alpha).rhs
        gap = abs(_scalar_loss(loss_fn, s, alpha) - rhs)
        res.record(inst, gap <= IDENTITY_TOL, gap)
    return res


def entropy_suite(seed: int, n: int = 500, loss_fn: Callable = loss_from_scores) -> SuiteResult:
    res = SuiteResult("entropy_decomposition")
    for inst, rng in _instances(seed, 1, n):
        s = random_scores(rng)
        alpha = float(rng.uniform(1e-3, 1.0 - 1e-3))
        dec = entropy_decomposition_from_scores(s, alpha)
        rhs = _scalar_loss(loss_fn, s, 1.0) - (1.0 - alpha) / alpha * dec.renyi_entropy
        gap = abs(_scalar_loss(loss_fn, s, alpha) - rhs)
        res.record(inst, gap <= IDENTITY_TOL, gap)
    return res


def interpolation_suite(seed: int, n: int = 500, loss_fn: Callable = loss_from_scores) -> SuiteResult:
    """l_1 <= l_a2 <= l_a1 <= l_0 for 0 < a1 <= a2 <= 1; records the worst violation."""
    res = SuiteResult("interpolation_monotonicity")
    for inst, rng in _instances(seed, 2, n):
        s = random_scores(rng)
        a1, a2 = np.sort(rng.uniform(0.0, 1.0, size=2))
        chain = [_scalar_loss(loss_fn, s, a) for a in (1.0, float(a2), float(a1), 0.0)]
        viol = max(0.0, *(chain[k] - chain[k + 1] for k in range(3)))
        res.record(inst, viol <= INEQUALITY_SLACK, viol)
    return res


def variance_suite(seed: int, n: int = 500, loss_fn: Callable = loss_from_scores) -> SuiteResult:
    res = SuiteResult("variance_lower_bound")
    for inst, rng in _instances(seed, 3, n):
        s = random_scores(rng)
        alpha = float(rng.uniform(1e-3, 1.0))
        vb = variance_bound_from_scores(s, alpha)
        gap = _scalar_loss(loss_fn, s, 0.0) - _scalar_loss(loss_fn, s, alpha)
        viol = max(0.0, vb.bound - gap)
        res.record(inst, viol <= INEQUALITY_SLACK, viol)
    return res


def shielding_suite(seed: int, n: int = 500, loss_fn: Callable = loss_from_scores) -> SuiteResult:
    """Per-particle gradient of the single-example loss against the exponential bound.

    The gradient norm is measured by central differences of ``loss_fn`` along
    the score direction, so a broken loss shows up here as well.
    """
    res = SuiteResult("shielding_bound")
    for inst, rng in _instances(seed, 4, n):
        s = random_scores(rng)
        m = s.size
        d = int(rng.integers(1, 5))
        grads = rng.normal(size=(m, d))
        alpha = float(rng.uniform(1e-3, 1.0))
        rows = shielding_from_scores(s, grads, alpha)
        # d l / d s_i by central differences; chain rule through grad s_i
        h = 1e-6
        dl = np.empty(m)
        for i in range(m):
            e = np.zeros(m)
            e[i] = h
            dl[i] = (_scalar_loss(loss_fn, s + e, alpha) - _scalar_loss(loss_fn, s - e, alpha)) / (2 * h)
        fd_norm = np.abs(dl) * np.linalg.norm(grads, axis=1)
        bound = np.array([r.bound for r in rows])
        # FD noise is ~1e-10 absolute; the analytic rows carry the exact check
        viol = float(np.max(np.maximum(fd_norm - bound - 1e-7 * (1 + bound), 0.0)))
        ok = all(r.holds for r in rows) and viol == 0.0
        res.record(inst, ok, viol)
    return res


def cumulant_suite(seed: int, n: int = 50, loss_fn: Callable = loss_from_scores) -> SuiteResult:
    """Remainder ratio e(1e-3) / e(1e-2) of the second-order cumulant expansion.

    Instances need M >= 3 and a clearly skewed score distribution, since the
    leading remainder term is proportional to the third cumulant.
    """
    lo, hi = CUMULANT_RATIO_RANGE
    res = SuiteResult("cumulant_expansion")
    for inst, rng in _instances(seed, 5, n):
        while True:
            s = random_scores(rng, 3, 8)
            c = s - s.mean()
            var = float(np.mean(c * c))
            k3 = float(np.mean(c**3))
            if var > 1e-2 and abs(k3) >= 0.2 * var**1.5:
                break

        def remainder(alpha):
            if loss_fn is loss_from_scores:
                return cumulant_remainder(s, alpha)
            gap = _scalar_loss(loss_fn, s, 0.0) - _scalar_loss(loss_fn, s, alpha)
            return abs(gap - 0.5 * alpha * var)

        e_small, e_big = remainder(1e-3), remainder(1e-2)
        ratio = e_small / e_big if e_big > 0 else np.inf
        # worst = distance from the accepted band
        dist = 0.0 if lo <= ratio <= hi else float(min(abs(ratio - lo), abs(ratio - hi)))
        res.record(inst, lo <= ratio <= hi, dist)
    return res


SUITES = (dv_suite, entropy_suite, interpolation_suite, variance_suite, shielding_suite, cumulant_suite)


def run_all(seed: int = 0, loss_fn: Callable = loss_from_scores, n: int = 500, n_cumulant: int = 50) -> list:
    out = []
    for suite in SUITES:
        count = n_cumulant if suite is cumulant_suite else n
        out.append(suite(seed, count, loss_fn))
    return out


def results_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUITE_COLUMNS)
    for r in results:
        w.writerow([r.name, r.instances, len(r.failures), repr(float(r.worst)), str(r.passed).lower()])
    return buf.getvalue()
