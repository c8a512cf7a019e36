import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from renyi_flow import config as config_mod
from renyi_flow.experiments import cmd_dpo_toy
from renyi_flow.models import LowRankAdapterModel
from renyi_flow.preference import (
    PreferenceData,
    PreferenceEnsemble,
    PreferenceTriple,
    log_r,
    log_sigmoid,
    margins,
    minibatch_preference_loss,
    particle_margin,
    preference_gradients,
    preference_loss,
    preference_responsibilities,
    sample_preference_conflict,
)

from helpers import FD_RTOL, rel_err

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def make_case(rng, m=None, n=None, scale=1.0, beta=None):
    d_in, d_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    rank = int(rng.integers(1, min(d_in, d_out) + 1))
    model = LowRankAdapterModel(rng.normal(size=(d_out, d_in)), rank, float(rng.uniform(0.5, 2.0)))
    m = m or int(rng.integers(1, 5))
    n = n or int(rng.integers(1, 6))
    params = scale * rng.normal(size=(m, model.param_dim))
    beta = beta if beta is not None else float(rng.uniform(0.05, 2.0))
    ens = PreferenceEnsemble(model, params, beta)
    data = PreferenceData(rng.normal(size=(n, d_in)), rng.normal(size=(n, d_out)), rng.normal(size=(n, d_out)))
    return ens, data


class TestMargins:
    def test_zero_adapter(self):
        rng = np.random.default_rng(0)
        ens, data = make_case(rng, scale=0.0)
        assert np.all(margins(ens, data) == 0.0)

    def test_by_hand(self):
        w0 = np.array([[1.0, 0.0], [0.0, 2.0]])
        model = LowRankAdapterModel(w0, 1, 1.0)
        theta = np.array([1.0, 0.5, 0.2, -0.4])  # A = (1, 0.5)', B = (0.2, -0.4)'
        ens = PreferenceEnsemble(model, theta[None, :])
        x, yp, ym = np.array([1.0, 2.0]), np.array([0.5, 3.0]), np.array([1.5, 4.5])
        w = w0 + np.outer([1.0, 0.5], [0.2, -0.4])

        def lp(W, y):
            r = y - W @ x
            return -0.5 * r @ r

        expect = lp(w, yp) - lp(w, ym) - lp(w0, yp) + lp(w0, ym)
        assert particle_margin(ens, 0, PreferenceTriple(x, yp, ym)) == pytest.approx(expect, abs=1e-12)

    def test_swap_antisymmetry(self):
        rng = np.random.default_rng(1)
        ens, data = make_case(rng, m=3, n=5)
        np.testing.assert_array_equal(margins(ens, data.swapped()), -margins(ens, data))
        r = np.exp(log_r(ens, data))
        r_sw = np.exp(log_r(ens, data.swapped()))
        np.testing.assert_allclose(r_sw, 1.0 - r, atol=1e-15)

    def test_particle_index(self):
        rng = np.random.default_rng(2)
        ens, data = make_case(rng, m=2, n=1)
        with pytest.raises(IndexError):
            particle_margin(ens, 2, data[0])


class TestLoss:
    def test_log_sigmoid_stable(self):
        assert log_sigmoid(-800.0) == -800.0
        assert log_sigmoid(800.0) == 0.0
        assert log_sigmoid(0.0) == pytest.approx(-math.log(2), abs=1e-16)

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
    def test_zero_margin(self, alpha):
        rng = np.random.default_rng(3)
        ens, data = make_case(rng, scale=0.0)
        assert preference_loss(ens, alpha, data[0]) == pytest.approx(math.log(2), abs=1e-14)

    def test_mixture_value(self):
        # with W0 = 0 and W = a*b the margin is a*b*x*(y+ - y-); pick it so r = (0.9, 0.5) at beta = 1
        model = LowRankAdapterModel(np.zeros((1, 1)), 1, 1.0)
        ens = PreferenceEnsemble(model, np.array([[1.0, 1.0], [0.0, 0.0]]), beta=1.0)
        t = PreferenceTriple(np.array([1.0]), np.array([math.log(9.0)]), np.array([0.0]))
        r = np.exp(log_r(ens, t))[:, 0]
        np.testing.assert_allclose(r, [0.9, 0.5], atol=1e-14)
        assert preference_loss(ens, 1.0, t) == pytest.approx(-math.log(0.7), abs=1e-14)
        assert -math.log(0.7) == pytest.approx(0.35667, abs=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_in_alpha(self, seed):
        ens, data = make_case(np.random.default_rng(seed), scale=2.0)
        l0, lh, l1 = (preference_loss(ens, a, data) for a in (0.0, 0.5, 1.0))
        assert np.all(l0 >= lh - 1e-12) and np.all(lh >= l1 - 1e-12)

    def test_alpha_range(self):
        ens, data = make_case(np.random.default_rng(4))
        with pytest.raises(ValueError):
            preference_loss(ens, 1.5, data)


class TestGradients:
    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        h = 1e-5
        for _ in range(100):
            ens, data = make_case(rng)
            alpha = float(rng.uniform(0.0, 1.0))
            n_train = int(rng.integers(len(data), 3 * len(data) + 1))
            g = preference_gradients(ens, alpha, data, n_train)
            fd = np.empty_like(g)
            for i in range(ens.M):
                for k in range(ens.model.param_dim):
                    p = ens.params.copy()
                    p[i, k] += h
                    up = minibatch_preference_loss(PreferenceEnsemble(ens.model, p, ens.beta), alpha, data, n_train)
                    p[i, k] -= 2 * h
                    dn = minibatch_preference_loss(PreferenceEnsemble(ens.model, p, ens.beta), alpha, data, n_train)
                    fd[i, k] = (up - dn) / (2 * h)
            assert rel_err(g, fd) <= FD_RTOL

    def test_confident_particle_has_vanishing_gradient(self):
        model = LowRankAdapterModel(np.zeros((1, 1)), 1, 1.0)
        t = PreferenceData(np.array([[1.0]]), np.array([[1.0]]), np.array([[0.0]]))
        # Delta = a*b for W0 = 0; a huge positive product makes r -> 1
        ens = PreferenceEnsemble(model, np.array([[40.0, 40.0], [0.1, 0.1]]), beta=1.0)
        g = preference_gradients(ens, 0.5, t, 1)
        assert np.linalg.norm(g[0]) < 1e-100
        assert np.linalg.norm(g[1]) > 1e-3

    def test_alpha_zero_uniform(self):
        ens, data = make_case(np.random.default_rng(6), m=3, n=4, scale=2.0)
        w, e = preference_responsibilities(ens, 0.0, data)
        np.testing.assert_array_equal(w, np.full((3, 4), 1.0 / 3))
        np.testing.assert_array_equal(e, np.full(4, 3.0))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_responsibility_columns(self, seed, alpha):
        ens, data = make_case(np.random.default_rng(seed), scale=3.0)
        w, e = preference_responsibilities(ens, alpha, data)
        np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-12)
        assert np.all(e >= 1 - 1e-12) and np.all(e <= ens.M + 1e-12)


class TestData:
    def test_csv_round_trip(self, tmp_path):
        data, _ = sample_preference_conflict(10, 3, 2, 1.0, True, np.random.default_rng(7))
        path = tmp_path / "prefs.csv"
        data.write_csv(path)
        back = PreferenceData.read_csv(path)
        for a, b in ((data.X, back.X), (data.Y_plus, back.Y_plus), (data.Y_minus, back.Y_minus)):
            np.testing.assert_array_equal(a, b)
        assert path.read_text().splitlines()[0] == "x_0,x_1,x_2,yplus_0,yplus_1,yminus_0,yminus_1"

    def test_conflicting_subsets_swap(self):
        data, labels = sample_preference_conflict(20, 2, 2, 1.0, True, np.random.default_rng(8))
        a, b = data.subset(labels == 0), data.subset(labels == 1)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.Y_plus, b.Y_minus)

    def test_validation(self):
        with pytest.raises(ValueError):
            PreferenceData(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            PreferenceData(np.array([[np.nan]]), np.zeros((1, 1)), np.zeros((1, 1)))
        with pytest.raises(ValueError):
            PreferenceEnsemble(LowRankAdapterModel(np.zeros((1, 1)), 1, 1.0), np.zeros((2, 3)))


@pytest.mark.xfail(strict=True, reason="contradictory preference subsets do not drive the per-subset ESS "
                                       "below 1.5 at beta=0.1; see notes/decisions.md")
def test_conflicting_preferences_specialise(tmp_path):
    cfg = config_mod.load(CONFIGS / "dpo_toy.toml", default_model="low_rank_adapter",
                          default_dataset="preference_conflict")
    res = cmd_dpo_toy(cfg, tmp_path)
    subsets = res.report["runs"]["alpha_config"]["subsets"]
    assert all(s["mean_ess"] < 1.5 for s in subsets.values())
