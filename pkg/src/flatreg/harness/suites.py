"""Invariant suites run by ``flatreg verify``.

Each suite returns a list of :class:`Check` rows with the measured value,
the bound or tolerance it is held to, and the verdict.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg as sla

from .. import modelzoo as mz
from .. import objective as obj
from ..errors import EdgeOfStability
from ..regularizer import RegConfig, reg_grad, reg_value, reg_value_from_eigs, shape_matrix
from ..spectral import LEMMAS, contraction_report, eig_sym, projector_onto_range, spectral_apply
from .config import ExperimentConfig, ModelSpec, MODEL_FAMILIES
from .models import build_model, quad_param_design, random_orthogonal

__all__ = ["Check", "SUITES", "run_suites"]


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    measured: float
    bound: float
    passed: bool
    detail: str = ""

    def row(self):
        return [self.suite, self.name, self.measured, self.bound, bool(self.passed), self.detail]


def _le(suite, name, measured, bound, detail=""):
    measured = float(measured)
    return Check(suite, name, measured, float(bound), bool(measured <= bound), detail)


def _rng(cfg: ExperimentConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1000 + tag,)))


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)) if np.any(b) else float(np.linalg.norm(a))


def _zoo():
    """Small instances of every family, built from their config defaults."""
    out = {}
    for fam in MODEL_FAMILIES:
        params = {k: v for k, (_, v) in MODEL_FAMILIES[fam].items()}
        if fam == "quadratic":
            params = {"eigenvalues": [2.0, 1.0, 0.5, 0.0], "rotation_seed": 3}
        out[fam] = build_model(ModelSpec(fam, params))
    return out


def _probe(built, rng, scale=0.3):
    return built.reference + scale * rng.standard_normal(built.reference.size)


# ---------------------------------------------------------------------------

def suite_spectral(cfg: ExperimentConfig) -> list[Check]:
    rng = _rng(cfg, 0)
    checks = []
    worst_rec = worst_orth = worst_fn = worst_proj = 0.0
    for _ in range(10):
        A = rng.standard_normal((6, 6))
        M = A + A.T
        s = eig_sym(M)
        nrm = max(1.0, np.linalg.norm(M))
        worst_rec = max(worst_rec, np.linalg.norm(s.reconstruct() - M) / nrm)
        worst_orth = max(worst_orth, np.linalg.norm(s.basis.T @ s.basis - np.eye(6)))
        worst_fn = max(worst_fn, _rel(spectral_apply(M / nrm, np.exp), sla.expm(M / nrm)))
        B = rng.standard_normal((6, 3))
        P = projector_onto_range(B @ B.T)
        worst_proj = max(worst_proj, np.linalg.norm(P @ P - P))
    checks.append(_le("spectral", "reconstruction", worst_rec, 1e-12))
    checks.append(_le("spectral", "orthonormal_basis", worst_orth, 1e-12))
    checks.append(_le("spectral", "exp_vs_expm", worst_fn, 1e-10))
    checks.append(_le("spectral", "projector_idempotent", worst_proj, 1e-12))
    return checks


def suite_contraction(cfg: ExperimentConfig) -> list[Check]:
    rng = _rng(cfg, 1)
    tau_max = int(cfg.options["tau_max"])
    nu = cfg.hyper.nu
    counts = {k: 0 for k in LEMMAS}
    worst = {k: 0.0 for k in LEMMAS}
    for _ in range(int(cfg.options["fuzz_instances"])):
        d = int(rng.integers(2, 9))
        n = int(rng.integers(1, 9))
        P = rng.standard_normal((n, d)) * rng.uniform(0.1, 3.0)
        G = P.T @ P / n
        lmax = float(np.linalg.eigvalsh(G)[-1])
        eta = rng.uniform(0.05, 1.0) * (2.0 - nu) / lmax
        rep = contraction_report(G, eta, nu, tau_max, P)
        for c in rep.checks.values():
            counts[c.name] += c.violations
            worst[c.name] = max(worst[c.name], c.worst_ratio)
    return [Check("contraction", f"lemma_{k}", float(worst[k]), 1.0, counts[k] == 0,
                  f"{counts[k]} violations; measured is the worst measured/bound ratio") for k in LEMMAS]


def _fd_jac(fn: Callable, theta, h=1e-6):
    cols = []
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        cols.append((fn(theta + e) - fn(theta - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def suite_gradients(cfg: ExperimentConfig) -> list[Check]:
    rng = _rng(cfg, 2)
    checks = []
    for fam, built in _zoo().items():
        b = built.bundle
        m = b.model
        wj = wh = wg = wH = 0.0
        for _ in range(int(cfg.options["probes"])):
            th = _probe(built, rng)
            wj = max(wj, _rel(m.jacobian(th), _fd_jac(lambda t: m.values(t), th)))
            wh = max(wh, _rel(m.hessians(th), _fd_jac(lambda t: m.jacobian(t), th)))
            wg = max(wg, _rel(obj.grad(b, th), _fd_jac(lambda t: np.array(obj.loss(b, t)), th)))
            wH = max(wH, _rel(obj.hessian(b, th), _fd_jac(lambda t: obj.grad(b, t), th)))
        checks.append(_le("gradients", f"{fam}_jacobian_fd", wj, 1e-6))
        checks.append(_le("gradients", f"{fam}_hessians_fd", wh, 1e-6))
        checks.append(_le("gradients", f"{fam}_loss_grad_fd", wg, 1e-6))
        checks.append(_le("gradients", f"{fam}_loss_hessian_fd", wH, 1e-6))
    return checks


def suite_regularizer(cfg: ExperimentConfig) -> list[Check]:
    rng = _rng(cfg, 3)
    checks = []
    lam = np.array([1.0, 0.5])
    oracle = -5.0 * (math.log(0.95) + math.log(0.975))
    checks.append(_le("regularizer", "diag_1_0.5_eta_0.1", abs(reg_value_from_eigs(lam, 0.1) - oracle), 1e-9))
    for fam, built in _zoo().items():
        b = built.bundle
        worst = 0.0
        for _ in range(int(cfg.options["probes"])):
            th = _probe(built, rng)
            top = float(np.max(np.abs(np.linalg.eigvalsh(obj.hessian(b, th)))))
            rc = RegConfig(eta=0.5 / max(top, 1e-3), lam=0.0)
            worst = max(worst, _rel(reg_grad(b, th, rc, "contraction"), reg_grad(b, th, rc, "finite-diff")))
        checks.append(_le("regularizer", f"{fam}_grad_contraction_vs_fd", worst, 1e-4))
    # engineered failure: configured eta on the configured model at its reference point
    built = build_model(cfg.model)
    rc = cfg.hyper.reg_config(built.bundle.alpha)
    top = float(np.linalg.eigvalsh(obj.hessian(built.bundle, built.reference))[-1])
    edge = 2.0 * (1.0 + rc.beta)
    try:
        R = reg_value(built.bundle, built.reference, rc)
        checks.append(Check("regularizer", "edge_of_stability", rc.eta * top, edge, math.isfinite(R),
                            f"R = {R:.6g} on {cfg.model.family}"))
    except EdgeOfStability as exc:
        checks.append(Check("regularizer", "edge_of_stability", rc.eta * top, edge, False,
                            f"EdgeOfStability: {exc}"))
    return checks


def suite_hessian_split(cfg: ExperimentConfig) -> list[Check]:
    rng = _rng(cfg, 4)
    checks = []
    zoo = _zoo()
    for fam in ("quadratic", "quad_param", "redundant_quad_param", "cycling"):
        built = zoo[fam]
        worst = 0.0
        for _ in range(max(20, int(cfg.options["probes"]))):
            hs = obj.hessian_split(built.bundle, _probe(built, rng))
            if hs.bound > 0:
                worst = max(worst, hs.norm_E / hs.bound)
            elif hs.norm_E > 0:
                worst = math.inf
        checks.append(_le("hessian_split", f"{fam}_stated_bound_ratio", worst, 1.0))
    worst = 0.0
    for _ in range(max(20, int(cfg.options["probes"]))):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        X, w = quad_param_design(n, d, int(rng.integers(0, 2**31)))
        model, ds = mz.make_quad_param_regression(X, w)
        b = obj.regression_bundle(model, ds)
        hs = obj.hessian_split(b, rng.standard_normal(d))
        if hs.derived_bound > 0:
            worst = max(worst, hs.norm_E / hs.derived_bound)
    checks.append(_le("hessian_split", "random_quad_param_derived_bound_ratio", worst, 1.0 + 1e-12))
    return checks


def suite_constants(cfg: ExperimentConfig) -> list[Check]:
    checks = []
    for kind in obj.LOSS_KINDS:
        worst = 0.0
        feasible = True
        for p in (0.1, 0.2, 0.3, 0.5):
            a, n = obj.loss_constants(kind, p), obj.numeric_minimizer(kind, p)
            worst = max(worst, abs(a.c - n.c), abs(a.sigma2 - n.sigma2), abs(a.alpha - n.alpha))
            feasible &= obj.verify_quadratic_approx(kind, p).feasible
        checks.append(_le("constants", f"{kind}_closed_vs_numeric", worst, 1e-8))
        checks.append(Check("constants", f"{kind}_quadratic_approx_feasible", float(feasible), 1.0, feasible))
    return checks


def suite_shape(cfg: ExperimentConfig) -> list[Check]:
    rng = _rng(cfg, 5)
    d, eta, lam = 6, 0.3, 0.01
    Q = random_orthogonal(d, rng)
    l = np.array([3.0, 2.0, 1.5, 1.0, 0.0, 0.0])
    H = (Q * l) @ Q.T
    H = 0.5 * (H + H.T)
    A = rng.standard_normal((d, d))
    Sig = A @ A.T / d
    sm = shape_matrix(H, Sig, eta, lam)
    checks = [_le("shape", "fixed_point_residual", sm.residual, 1e-10)]
    P = projector_onto_range(H)
    ref = lam * np.linalg.solve(2.0 * np.eye(d) - eta * H, P)
    checks.append(_le("shape", "sigma_equals_H", np.max(np.abs(shape_matrix(H, H, eta, lam).S - ref)), 1e-10))
    M = np.eye(d) - eta * H
    Q0 = eta * lam * P @ Sig @ P
    S = np.zeros((d, d))
    for _ in range(20000):
        S_new = M @ S @ M + Q0
        if np.max(np.abs(S_new - S)) < 1e-17:
            S = S_new
            break
        S = S_new
    checks.append(_le("shape", "eigenbasis_vs_iteration", np.max(np.abs(sm.S - S)), 1e-12))
    return checks


SUITES: dict[str, Callable[[ExperimentConfig], list[Check]]] = {
    "spectral": suite_spectral,
    "contraction": suite_contraction,
    "gradients": suite_gradients,
    "regularizer": suite_regularizer,
    "hessian_split": suite_hessian_split,
    "constants": suite_constants,
    "shape": suite_shape,
}


def run_suites(cfg: ExperimentConfig, names) -> list[Check]:
    out = []
    for name in names:
        if name not in SUITES:
            raise KeyError(name)
        out.extend(SUITES[name](cfg))
    return out
