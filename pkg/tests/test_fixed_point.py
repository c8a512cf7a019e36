import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renyi_flow.fixed_point import (
    SWEEP_COLUMNS,
    FixedPointConfig,
    analytic_crossing,
    specialist_transition_sweep,
    fixed_point_residual,
    gibbs_posterior,
    solve_self_consistent,
    total_variation,
)
from renyi_flow.models import DiscreteTable


def random_table(rng, k_max=5, n_max=6):
    k = int(rng.integers(1, k_max + 1))
    n = int(rng.integers(1, n_max + 1))
    return DiscreteTable(tuple(range(k)), rng.uniform(0.05, 1.0, size=(k, n)))


def naive_map(q, table, alpha, lam, prior):
    # direct transcription of the self-consistency equation, no rescaling
    p = table.table**alpha
    w = p / (q @ p)
    logits = np.log(prior) + w.sum(axis=1) / (lam * alpha)
    e = np.exp(logits - logits.max())
    return e / e.sum()


class TestSolver:
    def test_single_label(self):
        res = solve_self_consistent(DiscreteTable(("only",), [[0.3, 0.7]]), 0.5, 1.0)
        assert res.converged and res.iterations == 1
        assert res.posterior["only"] == 1.0

    def test_symmetric_example(self):
        q = solve_self_consistent(DiscreteTable.specialist_generalist(), 0.7, 1.0).posterior
        assert abs(q["a"] - q["b"]) <= 1e-9

    def test_alpha_one_favours_specialists(self):
        q = solve_self_consistent(DiscreteTable.specialist_generalist(), 1.0, 1.0).posterior
        assert q["a"] > q["g"]

    def test_simplex(self):
        q = solve_self_consistent(DiscreteTable.specialist_generalist(), 0.3, 1.0).posterior.probs
        assert np.all(q >= 0) and abs(q.sum() - 1.0) <= 1e-12

    def test_matches_naive_map(self):
        rng = np.random.default_rng(0)
        t = random_table(rng)
        prior = rng.dirichlet(np.ones(t.K))
        res = solve_self_consistent(t, 0.6, 1.3, prior=prior)
        np.testing.assert_allclose(naive_map(res.posterior.probs, t, 0.6, 1.3, prior), res.posterior.probs,
                                   atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_residual(self, seed):
        rng = np.random.default_rng(seed)
        t = random_table(rng)
        alpha, lam = float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.3, 3.0))
        cfg = FixedPointConfig()
        res = solve_self_consistent(t, alpha, lam, cfg=cfg)
        assert res.converged
        assert fixed_point_residual(res.posterior.probs, t, alpha, lam) <= 10 * cfg.tol

    def test_small_alpha_matches_gibbs(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(50):
            t = random_table(rng)
            q = solve_self_consistent(t, 1e-3, 1.0).posterior.probs
            worst = max(worst, total_variation(q, gibbs_posterior(t, 1.0).probs))
        assert worst < 0.01

    def test_permutation_symmetry(self):
        # swapping labels 0 and 1 together with observations 0 and 1 leaves the table unchanged
        rng = np.random.default_rng(2)
        for _ in range(20):
            u, v, c = rng.uniform(0.05, 1, size=3)
            extra = rng.uniform(0.05, 1, size=(2, 1))
            t = DiscreteTable((0, 1, 2), np.array([[u, v, extra[0, 0]], [v, u, extra[0, 0]], [c, c, extra[1, 0]]]))
            q = solve_self_consistent(t, float(rng.uniform(0.1, 1)), 1.0).posterior.probs
            assert abs(q[0] - q[1]) <= 1e-9

    def test_uniqueness(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            t = random_table(rng)
            alpha = float(rng.uniform(0.05, 1.0))
            a = solve_self_consistent(t, alpha, 1.0).posterior.probs
            b = solve_self_consistent(t, alpha, 1.0, init=rng.dirichlet(np.ones(t.K))).posterior.probs
            assert total_variation(a, b) <= 1e-6

    def test_nonconvergence_reported(self):
        res = solve_self_consistent(DiscreteTable.specialist_generalist(), 0.5, 1.0, cfg=FixedPointConfig(max_iters=2))
        assert not res.converged and res.iterations == 2

    @pytest.mark.parametrize("alpha,lam", [(0.0, 1.0), (0.5, 0.0)])
    def test_invalid(self, alpha, lam):
        with pytest.raises(ValueError):
            solve_self_consistent(DiscreteTable.specialist_generalist(), alpha, lam)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FixedPointConfig(tol=0.0)
        with pytest.raises(ValueError):
            FixedPointConfig(damping=0.0)


class TestGibbs:
    def test_example_ratio(self):
        q = gibbs_posterior(DiscreteTable.specialist_generalist(), 1.0)
        assert q["a"] / q["g"] == pytest.approx(0.9 * 0.01 / 0.09, rel=1e-12)
        assert q["a"] < q["g"]

    def test_large_lambda_is_prior(self):
        prior = np.array([0.2, 0.5, 0.3])
        q = gibbs_posterior(DiscreteTable.specialist_generalist(), 1e12, prior)
        np.testing.assert_allclose(q.probs, prior, atol=1e-10)

    def test_bayes(self):
        prior = np.array([0.2, 0.5, 0.3])
        lik = np.array([0.1, 0.4, 0.7])
        q = gibbs_posterior(DiscreteTable(("x", "y", "z"), lik[:, None]), 1.0, prior)
        np.testing.assert_allclose(q.probs, prior * lik / np.sum(prior * lik), rtol=1e-14)

    def test_bad_prior(self):
        with pytest.raises(ValueError):
            gibbs_posterior(DiscreteTable.specialist_generalist(), 1.0, [0.5, 0.5, 0.5])


class TestSweep:
    def test_analytic_root(self):
        a = analytic_crossing(0.9, 0.01, 0.3)
        assert 0.53 <= a <= 0.59
        assert abs(0.9**a + 0.01**a - 2 * 0.3**a) < 1e-5

    def test_crossing_and_ends(self):
        res = specialist_transition_sweep(0.9, 0.01, 0.3, 1.0, np.linspace(0.01, 1.0, 100))
        assert res.all_converged
        assert abs(res.fixed_point_crossing - res.analytic_crossing) <= 0.03
        assert res.rows[0][4] < 1 < res.rows[-1][4]

    def test_degenerate_equal_likelihoods(self):
        t = DiscreteTable(("g", "a", "b"), np.full((3, 2), 0.4))
        for alpha in (0.01, 0.5, 1.0):
            q = solve_self_consistent(t, alpha, 1.0).posterior
            assert q["a"] / q["g"] == pytest.approx(1.0, abs=1e-12)

    def test_csv_header(self):
        res = specialist_transition_sweep(0.9, 0.01, 0.3, 1.0, [0.2, 0.9])
        lines = res.to_csv().splitlines()
        assert lines[0] == ",".join(SWEEP_COLUMNS) and len(lines) == 3

    def test_invalid_table(self):
        with pytest.raises(ValueError):
            specialist_transition_sweep(0.3, 0.01, 0.9, 1.0, [0.5])
