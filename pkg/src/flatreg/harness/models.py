"""Build model bundles from a :class:`ModelSpec`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import modelzoo as mz
from ..objective import LossBundle, regression_bundle
from .config import ModelSpec

__all__ = ["BuiltModel", "build_model", "random_orthogonal", "quad_param_design"]


@dataclass(frozen=True)
class BuiltModel:
    bundle: LossBundle
    reference: np.ndarray
    start: np.ndarray


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def quad_param_design(n: int, d: int, seed: int, w_low: float = 0.5, w_high: float = 1.5):
    """Gaussian design scaled by ``1/sqrt(d)`` and a dense positive target weight."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    X = rng.standard_normal((n, d)) / np.sqrt(d)
    w = rng.uniform(w_low, w_high, d)
    return X, w


def build_model(spec: ModelSpec) -> BuiltModel:
    p = spec.params
    if spec.family == "quadratic":
        lam = np.asarray(p["eigenvalues"], dtype=float)
        if p["rotation_seed"] >= 0:
            Q = random_orthogonal(lam.size, np.random.default_rng(np.random.SeedSequence(p["rotation_seed"])))
            H = (Q * lam) @ Q.T
            H = 0.5 * (H + H.T)
        else:
            H = np.diag(lam)
        model, ds = mz.make_quadratic(H)
        ref = model.reference
        return BuiltModel(regression_bundle(model, ds), ref, ref.copy())
    if spec.family == "quad_param":
        X, w = quad_param_design(p["n"], p["d"], p["design_seed"], p["w_low"], p["w_high"])
        model, ds = mz.make_quad_param_regression(X, w)
        ref = model.reference
        return BuiltModel(regression_bundle(model, ds), ref, ref.copy())
    if spec.family == "redundant_quad_param":
        model, ds, theta0 = mz.make_redundant_quad_param(p["n"], p["m"], p["kappa"], p["support"],
                                                         p["sharp_weight"], p["design_seed"])
        return BuiltModel(regression_bundle(model, ds), theta0, theta0.copy())
    if spec.family == "mlp":
        model, ds = mz.make_mlp(p["widths"], n_samples=p["n_samples"], seed=p["seed"])
        ref = model.reference
        return BuiltModel(regression_bundle(model, ds), ref, ref.copy())
    if spec.family == "cycling":
        model, ds = mz.make_cycling_model(literal_f6=p["literal_f6"])
        ref = model.reference
        return BuiltModel(regression_bundle(model, ds), ref, ref.copy())
    raise ValueError(f"unknown model family {spec.family!r}")
