"""Experiment orchestration behind the command-line interface.

Every command takes a resolved config (see ``config.resolve``) and an
output directory, writes its CSV/JSON artifacts there and returns a
``RunOutput`` whose ``passed`` flag says whether the properties the command
asserts all hold. Outputs depend only on the config and seed.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import checks
from .config import ConfigError
from .fixed_point import FixedPointConfig, specialist_transition_sweep
from .models import (
    Dataset,
    LinearGaussianTwoRegime,
    LowRankAdapterModel,
    TinyMlp,
    sample_conflict,
    sample_linear,
    sample_poisoned,
    sample_two_regime,
)
from .numerics import make_rng, spawn_rngs
from .preference import (
    PreferenceEnsemble,
    margins,
    preference_responsibilities,
    sample_preference_conflict,
    train_preference,
)
from .renyi_loss import AlphaConfig, ess, score_gradients, score_matrix, weights_from_scores
from .stability import (
    epistemic_variance_profile,
    local_expansion_check,
    stability_report,
    two_regime_alpha_critical_closed_form,
)
from .trainer import TrainerConfig, init_ensemble, train


class RunOutput(NamedTuple):
    out_dir: Path
    files: list
    report: dict
    passed: bool


# --- serialization -----------------------------------------------------------


def _plain(obj):
    """Convert numpy scalars/arrays recursively so json emits repr-exact floats."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no inf/nan; keep them readable and deterministic
        return v if math.isfinite(v) else repr(v)
    return obj


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class _Writer:
    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list = []

    def text(self, name: str, content: str) -> None:
        (self.dir / name).write_text(content, encoding="utf-8", newline="\n")
        self.files.append(name)

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header, rows) -> None:
        path = self.dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        self.files.append(name)


def responsibility_rows(weights: np.ndarray):
    """Rows ``example_id, ess, argmax_particle, w_0..w_{M-1}``; argmax ties go to the lowest index."""
    e = ess(weights)
    e = np.atleast_1d(e)
    arg = np.argmax(weights, axis=0)  # first maximum wins
    header = ["example_id", "ess", "argmax_particle"] + [f"w_{i}" for i in range(weights.shape[0])]
    rows = [[b, float(e[b]), int(arg[b])] + [float(v) for v in weights[:, b]] for b in range(weights.shape[1])]
    return header, rows


# --- builders ----------------------------------------------------------------


def trainer_config(cfg: dict) -> TrainerConfig:
    return TrainerConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], beta1=cfg["beta1"],
        beta2=cfg["beta2"], adam_eps=cfg["adam_eps"], weight_decay=cfg["weight_decay"],
        regularizer=cfg["regularizer"], prior_tau=cfg["prior_tau"], kde_bandwidth=cfg["kde_bandwidth"],
        seed=cfg["seed"], init_spread=cfg["init_spread"])


def build_model(spec: dict):
    kind = spec["kind"]
    if kind == "two_regime":
        return LinearGaussianTwoRegime(spec["sigma"])
    if kind == "tiny_mlp":
        return TinyMlp(spec["d_in"], spec["hidden"], spec["d_out"], spec["sigma"])
    if kind == "low_rank_adapter":
        w0 = spec["w0_scale"] * make_rng(spec["w0_seed"]).normal(size=(spec["d_out"], spec["d_in"]))
        try:
            return LowRankAdapterModel(w0, spec["rank"], spec["sigma"])
        except ValueError as exc:
            raise ConfigError("model", str(exc)) from None
    raise ConfigError("model.kind", f"variant {kind!r} cannot be trained")


def build_regression_data(spec: dict, rng: np.random.Generator):
    """Returns (dataset, group labels or None)."""
    kind = spec["kind"]
    try:
        if kind == "linear":
            return sample_linear(spec["n"], spec["beta"], spec["sigma"], rng), None
        if kind == "two_regime":
            return sample_two_regime(spec["n"], spec["beta"], spec["a"], spec["epsilon"], spec["sigma"], rng), None
        if kind == "conflict":
            return sample_conflict(spec["n"], spec["beta"], spec["shift"], spec["sigma"], rng)
        if kind == "poisoned":
            data, mask = sample_poisoned(spec["n"], spec["beta"], spec["sigma"], spec["fraction"], spec["shift"], rng)
            return data, mask.astype(int)
        if kind == "csv":
            return Dataset.read_csv(spec["path"]), None
    except (ValueError, OSError) as exc:
        raise ConfigError("dataset", str(exc)) from None
    raise ConfigError("dataset.kind", f"variant {kind!r} is not a regression dataset")


def _input_dim(model) -> tuple:
    if isinstance(model, LinearGaussianTwoRegime):
        return 1, 1
    return model.d_in, model.d_out


def _train_ensemble(cfg: dict):
    data_rng, init_rng = spawn_rngs(cfg["seed"], 2)
    model = build_model(cfg["model"])
    data, groups = build_regression_data(cfg["dataset"], data_rng)
    d_in, d_out = _input_dim(model)
    if data.X.shape[1] != d_in or data.Y.shape[1] != d_out:
        raise ConfigError("model", f"model expects x in R^{d_in}, y in R^{d_out}; "
                                   f"dataset has {data.X.shape[1]} and {data.Y.shape[1]}")
    tcfg = trainer_config(cfg)
    ens0 = init_ensemble(model, cfg["num_particles"], cfg["init_spread"], init_rng)
    acfg = AlphaConfig(cfg["alpha"], cfg["lambda"], len(data))
    ens, trace = train(model, data, ens0, acfg, tcfg)
    return model, data, groups, ens, trace


def _responsibility_properties(w: np.ndarray, e: np.ndarray, alpha: float) -> dict:
    m = w.shape[0]
    props = {
        "columns_sum_to_one": bool(np.all(np.abs(np.sum(w, axis=0) - 1.0) <= 1e-10)),
        "ess_in_range": bool(np.all((e >= 1.0 - 1e-12) & (e <= m + 1e-9))),
    }
    if alpha == 0.0:
        props["ess_uniform_at_alpha_zero"] = bool(np.all(e == float(m)))
    return props


# --- commands ----------------------------------------------------------------


def cmd_train(cfg: dict, out_dir) -> RunOutput:
    out = _Writer(out_dir)
    out.json("config_resolved.json", cfg)
    model, data, groups, ens, trace = _train_ensemble(cfg)
    out.text("trace.csv", trace.to_csv())
    w = weights_from_scores(score_matrix(ens, data), cfg["alpha"])
    e = ess(w)
    out.csv("responsibilities.csv", *responsibility_rows(w))
    out.csv("particles.csv", [f"theta_{k}" for k in range(ens.params.shape[1])], ens.params.tolist())
    props = _responsibility_properties(w, e, cfg["alpha"])
    props["parameters_finite"] = bool(np.all(np.isfinite(ens.params)))
    report = {
        "command": "train",
        "num_particles": ens.M,
        "n_train": len(data),
        "steps": cfg["steps"],
        "mean_ess": float(np.mean(e)),
        "min_ess": float(np.min(e)),
        "final_objective": trace.rows[-1][3] if len(trace) else None,
        "trace_metadata": trace.metadata,
        "properties": props,
    }
    if groups is not None:
        report["mean_ess_by_group"] = {str(g): float(np.mean(e[groups == g])) for g in np.unique(groups)}
    passed = all(props.values())
    report["passed"] = passed
    out.json("report.json", report)
    return RunOutput(out.dir, out.files, report, passed)


def cmd_two_regime(cfg: dict, out_dir) -> RunOutput:
    ds = cfg["dataset"]
    if ds["kind"] != "two_regime":
        raise ConfigError("dataset.kind", "the two-regime command needs the 'two_regime' dataset")
    if cfg["model"]["kind"] != "two_regime":
        raise ConfigError("model.kind", "the two-regime command needs the 'two_regime' model")
    if cfg["model"]["sigma"] != ds["sigma"]:
        raise ConfigError("model.sigma", "must equal dataset.sigma (known-noise model)")
    exp = cfg["experiment"]
    out = _Writer(out_dir)
    out.json("config_resolved.json", cfg)
    (data_rng,) = spawn_rngs(cfg["seed"], 1)
    try:
        data = sample_two_regime(ds["n"], ds["beta"], ds["a"], ds["epsilon"], ds["sigma"], data_rng)
    except ValueError as exc:
        raise ConfigError("dataset", str(exc)) from None
    out.text("data.csv", data.to_csv())
    model = LinearGaussianTwoRegime(ds["sigma"])
    theta = np.asarray(exp["theta_eval"] if exp["theta_eval"] is not None
                       else [ds["beta"], ds["epsilon"] * ds["a"]], dtype=float)
    if theta.shape != (2,):
        raise ConfigError("experiment.theta_eval", "must have two entries")
    rep = stability_report(model, theta, data)
    out.text("stability.json", rep.to_json())
    closed = two_regime_alpha_critical_closed_form(ds["sigma"], ds["epsilon"], ds["a"])

    s_prof = exp["profile_s"]
    sigma_prof = np.diag([0.0, s_prof * s_prof])
    xs = np.linspace(-1.0, 1.0, exp["profile_points"])
    prof = epistemic_variance_profile(theta, sigma_prof, xs, ds["sigma"])
    out.csv("epistemic_profile.csv", ["x", "total_var", "epistemic_var"], prof)

    alpha_e = exp["expansion_alpha"]
    exp_rows = []
    for s in exp["expansion_scales"]:
        chk = local_expansion_check(model, theta, float(s), np.diag([0.0, 1.0]), alpha_e, data)
        exp_rows.append([float(s), chk.exact_delta, chk.predicted_delta, chk.rel_err])
    out.csv("expansion.csv", ["s", "exact_delta", "predicted_delta", "rel_err"], exp_rows)

    rel = [r[3] for r in exp_rows]
    smallest = min(range(len(exp_rows)), key=lambda k: exp_rows[k][0])
    order = sorted(range(len(exp_rows)), key=lambda k: -exp_rows[k][0])
    alignment = abs(float(rep.principal_direction[1]))
    props = {
        "alpha_critical_within_tolerance": abs(rep.alpha_critical - closed) <= exp["crossing_tol"],
        "epistemic_exact": all(e == s_prof * s_prof * max(x, 0.0) ** 2 for x, _, e in prof),
        "expansion_rel_err_decreasing": all(rel[order[k + 1]] < rel[order[k]] for k in range(len(order) - 1)),
        "expansion_rel_err_small": rel[smallest] <= 0.05,
    }
    if ds["epsilon"] > 0:
        props["direction_contamination_aligned"] = alignment >= 0.99
    passed = all(props.values())
    report = {
        "command": "two-regime",
        "alpha_critical_closed_form": closed,
        "alpha_critical_empirical": rep.alpha_critical,
        "abs_difference": abs(rep.alpha_critical - closed),
        "direction": rep.principal_direction,
        "direction_alignment_e2": alignment,
        "theta_eval": theta,
        "n_samples": len(data),
        "properties": props,
        "passed": passed,
    }
    out.json("report.json", report)
    return RunOutput(out.dir, out.files, report, passed)


def _shielding_columns(s: np.ndarray, g: np.ndarray, alpha: float):
    """Per example: (all particles satisfy the bound, max ratio grad_norm / bound)."""
    m, b = s.shape
    w = weights_from_scores(s, alpha)
    raw = np.linalg.norm(g, axis=2)  # (M, B)
    loss = -s
    bound = np.exp(-alpha * (loss - loss.min(axis=0))) * raw
    norm = w * raw
    holds = np.all(norm <= bound * (1.0 + 1e-12) + 1e-12, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, norm / np.where(bound > 0, bound, 1.0), 0.0)
    return holds, ratio.max(axis=0)


def cmd_poison(cfg: dict, out_dir) -> RunOutput:
    if cfg["dataset"]["kind"] != "poisoned":
        raise ConfigError("dataset.kind", "the poison command needs the 'poisoned' dataset")
    out = _Writer(out_dir)
    out.json("config_resolved.json", cfg)
    model, data, groups, ens, trace = _train_ensemble(cfg)
    alpha = cfg["alpha"]
    mask = groups.astype(bool)
    out.text("trace.csv", trace.to_csv())
    s = score_matrix(ens, data)
    w = weights_from_scores(s, alpha)
    e = ess(w)
    arg = np.argmax(w, axis=0)
    out.csv("responsibilities.csv", *responsibility_rows(w))
    holds, ratio = _shielding_columns(s, score_gradients(ens, data), alpha)
    out.csv("poison.csv", ["example_id", "poisoned", "ess", "argmax_particle", "shielding_max_ratio", "shielding_holds"],
            [[b, bool(mask[b]), float(e[b]), int(arg[b]), float(ratio[b]), bool(holds[b])] for b in range(len(data))])

    props = _responsibility_properties(w, e, alpha)
    props["shielding_holds"] = bool(np.all(holds))
    summary = {"n_poisoned": int(mask.sum()), "n_clean": int((~mask).sum())}
    if mask.any() and (~mask).any():
        ess_p, ess_c = float(np.mean(e[mask])), float(np.mean(e[~mask]))
        # absorbing set: particles carrying more responsibility on poisoned than on clean points
        absorbing = np.flatnonzero(w[:, mask].mean(axis=1) > w[:, ~mask].mean(axis=1))
        summary.update({
            "mean_ess_poisoned": ess_p,
            "mean_ess_clean": ess_c,
            "absorbing_particles": absorbing,
            "fraction_poisoned_absorbed": float(np.mean(np.isin(arg[mask], absorbing))),
            "fraction_clean_absorbed": float(np.mean(np.isin(arg[~mask], absorbing))),
        })
        if alpha > 0:
            props["poisoned_ess_below_clean"] = ess_p < ess_c
    passed = all(props.values())
    report = {"command": "poison", "alpha": alpha, "num_particles": ens.M, "summary": summary,
              "properties": props, "passed": passed}
    out.json("report.json", report)
    return RunOutput(out.dir, out.files, report, passed)


def default_alpha_grid() -> list:
    return [round(0.01 * k, 2) for k in range(1, 101)]


def cmd_fixedpoint(cfg: dict, out_dir) -> RunOutput:
    md = cfg["model"]
    if md["kind"] != "discrete_table":
        raise ConfigError("model.kind", "the fixedpoint command needs the 'discrete_table' model")
    if not cfg["lambda"] > 0:
        raise ConfigError("lambda", "must be positive for the self-consistent posterior")
    if not 0 < md["eps"] < md["m"] < md["h"] < 1:
        raise ConfigError("model", "require 0 < eps < m < h < 1")
    exp = cfg["experiment"]
    grid = exp["alpha_grid"] if exp["alpha_grid"] is not None else default_alpha_grid()
    if not grid or any(not 0 < float(a) <= 1 for a in grid):
        raise ConfigError("experiment.alpha_grid", "must be a non-empty list of values in (0, 1]")
    grid = sorted(float(a) for a in grid)
    out = _Writer(out_dir)
    out.json("config_resolved.json", cfg)
    fcfg = FixedPointConfig(exp["damping"], exp["tol"], exp["max_iters"])
    sweep = specialist_transition_sweep(md["h"], md["eps"], md["m"], cfg["lambda"], grid, fcfg)
    out.text("sweep.csv", sweep.to_csv())
    props = {"all_converged": sweep.all_converged}
    if sweep.analytic_crossing is not None:
        props["crossing_within_tolerance"] = (sweep.fixed_point_crossing is not None and abs(
            sweep.fixed_point_crossing - sweep.analytic_crossing) <= exp["crossing_tol"])
    passed = all(props.values())
    report = {
        "command": "fixedpoint",
        "analytic_crossing": sweep.analytic_crossing,
        "fixed_point_crossing": sweep.fixed_point_crossing,
        "ratio_at_alpha_min": sweep.rows[0][4],
        "ratio_at_alpha_max": sweep.rows[-1][4],
        "alpha_min": grid[0],
        "alpha_max": grid[-1],
        "properties": props,
        "passed": passed,
    }
    out.json("report.json", report)
    return RunOutput(out.dir, out.files, report, passed)


def _dpo_summary(ens: PreferenceEnsemble, data, labels, alpha: float) -> dict:
    delta = margins(ens, data)  # (M, N)
    _, e = preference_responsibilities(ens, alpha, data)
    out = {"margin_variance": float(np.mean(np.var(delta, axis=0))), "subsets": {}}
    for g in np.unique(labels):
        sel = labels == g
        mean_margin = delta[:, sel].mean(axis=1)
        out["subsets"][str(int(g))] = {
            "mean_ess": float(np.mean(e[sel])),
            "particle_mean_margin": mean_margin,
            "particle_margin_sign": np.sign(mean_margin).astype(int),
        }
    return out


def cmd_dpo_toy(cfg: dict, out_dir) -> RunOutput:
    ds = cfg["dataset"]
    if ds["kind"] != "preference_conflict":
        raise ConfigError("dataset.kind", "the dpo-toy command needs the 'preference_conflict' dataset")
    if cfg["model"]["kind"] != "low_rank_adapter":
        raise ConfigError("model.kind", "the dpo-toy command needs the 'low_rank_adapter' model")
    if cfg["regularizer"] == "kde":
        raise ConfigError("regularizer", "preference training supports 'prior' or 'none'")
    out = _Writer(out_dir)
    out.json("config_resolved.json", cfg)
    data_rng, init_rng = spawn_rngs(cfg["seed"], 2)
    model = build_model(cfg["model"])
    data, labels = sample_preference_conflict(ds["n"], model.d_in, model.d_out, ds["separation"],
                                              ds["conflicting"], data_rng)
    out.text("preferences.csv", data.to_csv())
    ens0 = init_ensemble(model, cfg["num_particles"], cfg["init_spread"], init_rng)
    tcfg = trainer_config(cfg)
    runs = {}
    rows = []
    for tag, alpha in (("alpha_zero", 0.0), ("alpha_config", cfg["alpha"])):
        res = train_preference(PreferenceEnsemble(model, ens0.params, cfg["beta_dpo"]), data, alpha,
                               cfg["lambda"], tcfg)
        out.text(f"trace_{tag}.csv", res.trace.to_csv())
        runs[tag] = {"alpha": alpha, **_dpo_summary(res.ensemble, data, labels, alpha)}
        delta = margins(res.ensemble, data)
        _, e = preference_responsibilities(res.ensemble, alpha, data)
        rows += [[tag, b, int(labels[b]), float(e[b])] + [float(v) for v in delta[:, b]] for b in range(len(data))]
    out.csv("margins.csv", ["run", "example_id", "subset", "ess"] + [f"margin_{i}" for i in range(ens0.M)], rows)

    props = {}
    if ds["conflicting"]:
        props["variance_increases_with_alpha"] = (runs["alpha_config"]["margin_variance"]
                                                  > runs["alpha_zero"]["margin_variance"])
    else:
        for tag, r in runs.items():
            signs = [np.asarray(v["particle_margin_sign"]) for v in r["subsets"].values()]
            props[f"margin_signs_agree_{tag}"] = all(bool(np.all(sg == sg[0])) for sg in signs)
    passed = all(props.values())
    report = {"command": "dpo-toy", "conflicting": ds["conflicting"], "runs": runs, "properties": props,
              "passed": passed}
    out.json("report.json", report)
    return RunOutput(out.dir, out.files, report, passed)


def cmd_check(cfg: dict, out_dir) -> RunOutput:
    exp = cfg["experiment"]
    out = _Writer(out_dir)
    out.json("config_resolved.json", cfg)
    results = checks.run_all(cfg["seed"], n=exp["instances"], n_cumulant=exp["cumulant_instances"])
    out.text("checks.csv", checks.results_csv(results))
    passed = all(r.passed for r in results)
    report = {"command": "check", "seed": cfg["seed"], "suites": {r.name: r.to_record() for r in results},
              "passed": passed}
    out.json("report.json", report)
    return RunOutput(out.dir, out.files, report, passed)


COMMANDS = {
    "train": (cmd_train, "two_regime", "linear"),
    "two-regime": (cmd_two_regime, "two_regime", "two_regime"),
    "poison": (cmd_poison, "two_regime", "poisoned"),
    "fixedpoint": (cmd_fixedpoint, "discrete_table", "none"),
    "dpo-toy": (cmd_dpo_toy, "low_rank_adapter", "preference_conflict"),
    "check": (cmd_check, "two_regime", "none"),
}
