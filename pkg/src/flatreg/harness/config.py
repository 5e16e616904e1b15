"""Experiment configuration: INI files with a closed schema.

A config has a ``[run]`` section, a ``[model]`` section, a ``[hyper]``
section and one section named after the experiment kind. Every key has a
type and a default; unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..dynamics import NOISE_KINDS, HyperParams
from ..errors import ConfigError
from ..io import content_hash

__all__ = ["ExperimentConfig", "ModelSpec", "EXPERIMENTS", "MODEL_FAMILIES", "default_config",
           "load_config", "parse_config", "config_from_dict"]

EXPERIMENTS = ("verify", "escape", "cycle", "couple", "limits", "constants")


def _float_list(s):
    return [float(v) for v in str(s).replace(";", ",").split(",") if v.strip()]


def _int_list(s):
    return [int(v) for v in str(s).replace(";", ",").split(",") if v.strip()]


def _str_list(s):
    return [v.strip() for v in str(s).replace(";", ",").split(",") if v.strip()]


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CAST = {"float": float, "int": int, "str": str, "bool": _bool,
         "floats": _float_list, "ints": _int_list, "strs": _str_list}

# family -> key -> (type, default)
MODEL_FAMILIES: dict[str, dict[str, tuple[str, Any]]] = {
    "quadratic": {"eigenvalues": ("floats", [1.0, 0.5]), "rotation_seed": ("int", -1)},
    "quad_param": {"n": ("int", 8), "d": ("int", 16), "design_seed": ("int", 0),
                   "w_low": ("float", 0.5), "w_high": ("float", 1.5)},
    "redundant_quad_param": {"n": ("int", 6), "m": ("int", 4), "kappa": ("float", 0.5),
                             "support": ("int", 2), "sharp_weight": ("float", 0.01),
                             "design_seed": ("int", 0)},
    "mlp": {"widths": ("ints", [3, 4]), "n_samples": ("int", 8), "seed": ("int", 0)},
    "cycling": {"literal_f6": ("bool", False)},
}

RUN_KEYS = {"experiment": ("str", "verify"), "seed": ("int", 0), "replicas": ("int", 1),
            "record_stride": ("int", 1), "out": ("str", "")}

HYPER_KEYS = {"eta": ("float", 0.05), "sigma": ("float", 0.0), "batch": ("int", 1), "beta": ("float", 0.0),
              "p": ("float", 0.2), "steps": ("int", 1000), "nu": ("float", 0.1),
              "rank_tol": ("float", 1e-10), "noise": ("str", "rademacher-label")}

OPTION_KEYS: dict[str, dict[str, tuple[str, Any]]] = {
    "verify": {"suites": ("strs", ["spectral", "contraction", "gradients", "regularizer",
                                   "hessian_split", "constants", "shape"]),
               "probes": ("int", 5), "fuzz_instances": ("int", 20), "tau_max": ("int", 1000)},
    "escape": {"eta_grid": ("floats", [0.01, 0.02, 0.04]), "tail_fraction": ("float", 0.1),
               "min_reduction": ("float", 0.3), "loss_factor": ("float", 3.0)},
    "cycle": {"ma_window": ("int", 2000), "max_deviation": ("float", 0.1)},
    "couple": {"lambda_grid": ("floats", [1e-4, 2e-4, 4e-4]), "seeds": ("int", 20),
               "horizon": ("int", 3000), "slope_low": ("float", 0.35), "slope_high": ("float", 0.65),
               "min_xi_gain": ("float", 3.0)},
    "limits": {"eta_grid": ("floats", [0.01, 0.1, 0.5, 1.0]), "eig_max": ("float", 1.9),
               "eig_points": ("int", 96), "spectrum": ("floats", [1.0, 0.5]),
               "nu_grid": ("floats", [1e-1, 1e-2, 1e-3, 1e-4]), "sharpness_tol": ("float", 0.1)},
    "constants": {"losses": ("strs", ["logistic", "exponential", "square"]),
                  "p_grid": ("floats", [0.1, 0.2, 0.3, 0.5]), "eps_q": ("float", 0.1),
                  "tolerance": ("float", 1e-8), "noise_draws": ("int", 100000)},
}

# per-experiment overrides of the generic defaults
_KIND_DEFAULTS: dict[str, dict[str, dict[str, Any]]] = {
    "verify": {"model": {"family": "quad_param"}, "hyper": {"eta": 0.05}},
    "escape": {"run": {"record_stride": 100, "replicas": 3},
               "model": {"family": "redundant_quad_param"},
               "hyper": {"eta": 0.04, "sigma": 0.5, "batch": 1, "steps": 50000}},
    "cycle": {"run": {"record_stride": 50}, "model": {"family": "cycling"},
              "hyper": {"eta": 0.015, "sigma": 0.0, "batch": 1, "steps": 500000, "noise": "none"}},
    "couple": {"run": {"record_stride": 10}, "model": {"family": "quad_param"},
               "hyper": {"eta": 0.05, "batch": 8, "steps": 3000}},
    "limits": {"model": {"family": "quadratic"}},
    "constants": {"model": {"family": "quadratic"}},
}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    replicas: int
    record_stride: int
    out: str
    model: ModelSpec
    hyper: HyperParams
    options: dict

    @property
    def reg(self):
        return self.hyper.reg_config()

    def to_dict(self) -> dict:
        h = self.hyper
        return {
            "run": {"experiment": self.kind, "seed": self.seed, "replicas": self.replicas,
                    "record_stride": self.record_stride, "out": self.out},
            "model": {"family": self.model.family, **copy.deepcopy(self.model.params)},
            "hyper": {"eta": h.eta, "sigma": h.sigma, "batch": h.B, "beta": h.beta, "p": h.p,
                      "steps": h.T, "nu": h.nu, "rank_tol": h.rank_tol, "noise": h.noise_kind},
            self.kind: copy.deepcopy(self.options),
        }

    def content_hash(self) -> str:
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "out"}
        return content_hash(d)

    def with_overrides(self, seed=None, out=None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["run"]["seed"] = int(seed)
        if out is not None:
            d["run"]["out"] = str(out)
        return config_from_dict(d)

    def to_ini(self) -> str:
        lines = []
        for sec, vals in self.to_dict().items():
            lines.append(f"[{sec}]")
            for k, v in vals.items():
                if isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _typed(section: str, key: str, spec: tuple[str, Any], raw):
    kind, _ = spec
    try:
        if kind in ("floats", "ints", "strs") and isinstance(raw, list):
            return [_CAST[kind[:-1]](v) if kind != "strs" else str(v) for v in raw]
        return _CAST[kind](raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from exc


def _fill(section: str, schema: dict, given: dict) -> dict:
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    out = {}
    for key, spec in schema.items():
        out[key] = _typed(section, key, spec, given[key]) if key in given else copy.deepcopy(spec[1])
    return out


def config_from_dict(raw: dict, kind: Optional[str] = None) -> ExperimentConfig:
    """Validate a ``section -> key -> value`` mapping and build the config.

    ``kind`` (the CLI subcommand) fills in a missing ``[run] experiment``;
    a conflicting value is an error.
    """
    raw = {str(k).strip(): dict(v) for k, v in raw.items()}
    run_raw = dict(raw.get("run", {}))
    given = run_raw.get("experiment")
    if kind is not None and given is not None and str(given).strip() != kind:
        raise ConfigError(f"config is for experiment {str(given).strip()!r}, not {kind!r}")
    if given is None:
        given = kind if kind is not None else RUN_KEYS["experiment"][1]
    kind = str(given).strip()
    run_raw["experiment"] = kind
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {kind!r}; expected one of {EXPERIMENTS}")
    unknown_sec = set(raw) - {"run", "model", "hyper", kind}
    if unknown_sec:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown_sec))}")
    kd = _KIND_DEFAULTS.get(kind, {})
    run = _fill("run", RUN_KEYS, {**kd.get("run", {}), **run_raw})
    model_raw = {**kd.get("model", {}), **raw.get("model", {})}
    family = str(model_raw.pop("family", "quad_param")).strip()
    if family not in MODEL_FAMILIES:
        raise ConfigError(f"unknown model family {family!r}")
    mparams = _fill("model", MODEL_FAMILIES[family], model_raw)
    hyper = _fill("hyper", HYPER_KEYS, {**kd.get("hyper", {}), **raw.get("hyper", {})})
    options = _fill(kind, OPTION_KEYS[kind], raw.get(kind, {}))
    if hyper["noise"] not in NOISE_KINDS:
        raise ConfigError(f"[hyper] noise must be one of {NOISE_KINDS}")
    if run["replicas"] < 1 or run["record_stride"] < 1:
        raise ConfigError("[run] replicas and record_stride must be >= 1")
    try:
        hp = HyperParams(eta=hyper["eta"], sigma=hyper["sigma"], B=hyper["batch"], beta=hyper["beta"],
                         p=hyper["p"], T=hyper["steps"], nu=hyper["nu"], rank_tol=hyper["rank_tol"],
                         seed=run["seed"], noise_kind=hyper["noise"])
    except ValueError as exc:
        raise ConfigError(f"[hyper] {exc}") from exc
    return ExperimentConfig(kind, run["seed"], run["replicas"], run["record_stride"], run["out"],
                            ModelSpec(family, mparams), hp, options)


def parse_config(text: str, kind: Optional[str] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return config_from_dict({s: dict(cp.items(s)) for s in cp.sections()}, kind)


def default_config(kind: str) -> ExperimentConfig:
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {kind!r}")
    return config_from_dict({"run": {"experiment": kind}})


def load_config(path, kind: Optional[str] = None) -> ExperimentConfig:
    """Load an INI config, or the config echoed in a run manifest (``.json``)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
        if "config" not in data:
            raise ConfigError(f"manifest {path} has no 'config' entry")
        return config_from_dict(data["config"], kind)
    return parse_config(text, kind)
