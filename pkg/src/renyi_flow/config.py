"""Run configuration: a TOML file with flat hyper-parameters and tagged tables.

Top-level keys are the hyper-parameters listed in ``TOP_LEVEL``. The
``[model]`` and ``[dataset]`` tables select a variant through ``kind`` and
carry that variant's parameters; ``[experiment]`` holds command-specific
knobs. Unknown keys anywhere are rejected with their dotted path.
"""

from __future__ import annotations

import sys
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


TOP_LEVEL: dict[str, Any] = {
    "alpha": 0.8,
    "lambda": 1.0,
    "num_particles": 4,
    "prior_tau": 1.0,
    "regularizer": "prior",
    "kde_bandwidth": "median",
    "learning_rate": 1e-2,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "weight_decay": 0.0,
    "batch_size": 32,
    "steps": 1000,
    "seed": 0,
    "init_spread": 0.1,
    "beta_dpo": 0.1,
}

MODEL_KINDS: dict[str, dict[str, Any]] = {
    "two_regime": {"sigma": 0.5},
    "low_rank_adapter": {"d_in": 4, "d_out": 3, "rank": 2, "sigma": 1.0, "w0_scale": 0.5, "w0_seed": 5},
    "tiny_mlp": {"d_in": 1, "hidden": 8, "d_out": 1, "sigma": 0.5},
    "discrete_table": {"h": 0.9, "eps": 0.01, "m": 0.3},
}

DATASET_KINDS: dict[str, dict[str, Any]] = {
    "two_regime": {"n": 100_000, "beta": 1.0, "a": 2.0, "epsilon": 0.2, "sigma": 0.5},
    "linear": {"n": 200, "beta": 1.0, "sigma": 0.5},
    "conflict": {"n": 200, "beta": 0.0, "shift": 3.0, "sigma": 0.5},
    "poisoned": {"n": 400, "beta": 1.0, "sigma": 0.5, "fraction": 0.1, "shift": 5.0},
    "preference_conflict": {"n": 200, "separation": 1.0, "conflicting": True},
    "csv": {"path": ""},
    "none": {},
}

EXPERIMENT_KEYS: dict[str, Any] = {
    # two-regime
    "theta_eval": None,
    "profile_s": 0.3,
    "profile_points": 41,
    "expansion_alpha": 0.8,
    "expansion_scales": [0.1, 0.03, 0.01],
    # fixedpoint
    "alpha_grid": None,
    "damping": 0.5,
    "tol": 1e-10,
    "max_iters": 100_000,
    # two-regime and fixedpoint acceptance band
    "crossing_tol": 0.03,
    # check
    "instances": 500,
    "cumulant_instances": 50,
}


def _type_ok(value, default) -> bool:
    if default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _merge(table: dict, defaults: dict, path: str) -> dict:
    out = dict(defaults)
    for key, value in table.items():
        kp = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(kp, "unknown key")
        if kp == "kde_bandwidth":
            # either the "median" sentinel or a number, checked in _validate
            out[key] = float(value) if isinstance(value, int) and not isinstance(value, bool) else value
            continue
        if not _type_ok(value, defaults[key]):
            raise ConfigError(kp, f"expected {type(defaults[key]).__name__}, got {type(value).__name__}")
        out[key] = float(value) if isinstance(defaults[key], float) else value
    return out


def _variant(raw: Any, kinds: dict, path: str, default_kind: str) -> dict:
    if raw is None:
        raw = {"kind": default_kind}
    if not isinstance(raw, dict):
        raise ConfigError(path, "must be a table")
    kind = raw.get("kind", default_kind)
    if kind not in kinds:
        raise ConfigError(f"{path}.kind", f"unknown variant {kind!r}; expected one of {sorted(kinds)}")
    rest = {k: v for k, v in raw.items() if k != "kind"}
    return {"kind": kind, **_merge(rest, kinds[kind], path)}


def _validate(cfg: dict) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(key, msg)

    need(0.0 <= cfg["alpha"] <= 1.0, "alpha", "must lie in [0, 1]")
    need(cfg["lambda"] >= 0.0, "lambda", "must be non-negative")
    need(cfg["num_particles"] >= 1, "num_particles", "must be at least 1")
    need(cfg["prior_tau"] > 0.0, "prior_tau", "must be positive")
    need(cfg["regularizer"] in ("prior", "kde", "none"), "regularizer", "must be 'prior', 'kde' or 'none'")
    bw = cfg["kde_bandwidth"]
    need(bw == "median" or (isinstance(bw, (int, float)) and not isinstance(bw, bool) and bw > 0),
         "kde_bandwidth", "must be 'median' or a positive number")
    need(cfg["learning_rate"] > 0.0, "learning_rate", "must be positive")
    need(0.0 <= cfg["beta1"] < 1.0, "beta1", "must lie in [0, 1)")
    need(0.0 <= cfg["beta2"] < 1.0, "beta2", "must lie in [0, 1)")
    need(cfg["adam_eps"] > 0.0, "adam_eps", "must be positive")
    need(cfg["weight_decay"] >= 0.0, "weight_decay", "must be non-negative")
    need(cfg["batch_size"] >= 1, "batch_size", "must be at least 1")
    need(cfg["steps"] >= 0, "steps", "must be non-negative")
    need(0 <= cfg["seed"] < 2**64, "seed", "must be an unsigned 64-bit integer")
    need(cfg["init_spread"] >= 0.0, "init_spread", "must be non-negative")
    need(cfg["beta_dpo"] > 0.0, "beta_dpo", "must be positive")
    ds = cfg["dataset"]
    if "n" in ds:
        need(ds["n"] >= 1, "dataset.n", "must be at least 1")
    if ds["kind"] == "csv":
        need(bool(ds["path"]), "dataset.path", "required for the csv variant")
    md = cfg["model"]
    if "sigma" in md:
        need(md["sigma"] > 0.0, "model.sigma", "must be positive")


def resolve(raw: dict, default_model: str = "two_regime", default_dataset: str = "linear") -> dict:
    """Fill defaults, check types and ranges, return a plain dict."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "must be a table")
    top = {k: v for k, v in raw.items() if k not in ("model", "dataset", "experiment")}
    cfg = _merge(top, TOP_LEVEL, "")
    cfg["model"] = _variant(raw.get("model"), MODEL_KINDS, "model", default_model)
    cfg["dataset"] = _variant(raw.get("dataset"), DATASET_KINDS, "dataset", default_dataset)
    exp = raw.get("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigError("experiment", "must be a table")
    cfg["experiment"] = _merge(exp, EXPERIMENT_KEYS, "experiment")
    _validate(cfg)
    return cfg


def read_raw(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"invalid TOML: {exc}") from None
    return raw


def load(path, **kw) -> dict:
    return resolve(read_raw(path), **kw)
