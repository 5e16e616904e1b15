"""Ornstein-Uhlenbeck companion processes and pathwise coupling checks.

The OU process linearizes label-noise SGD around a reference point
``theta*``: ``xi_{k+1} = (I - eta G) xi_k + eps*_k`` with
``eps*_k = (eta/B) sum_i eps_i grad f_i(theta*)`` and ``G = G(theta*)``.
Feeding it the same batches and label draws as an SGD run (replay) makes
the residual ``theta_k - xi_k - Phi_k`` a pathwise quantity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg as sla

from . import objective as obj
from .dynamics import HyperParams, NoiseRecord, NoiseStream, make_rng, run, run_phi
from .errors import InsufficientSamples
from .io import write_csv
from .regularizer import RegConfig, reg_loss
from .spectral import DEFAULT_RANK_TOL, check_symmetric, eig_sym, projector_onto_range

__all__ = [
    "OUState",
    "OUTrace",
    "ou_run",
    "ou_chained",
    "ou_momentum",
    "stationary_cov",
    "plain_stationary_cov",
    "momentum_block",
    "momentum_stationary_cov",
    "default_burn_in",
    "CouplingReport",
    "coupling_experiment",
    "EpsGammaVerdict",
    "eps_gamma_check",
]


@dataclass(frozen=True)
class OUState:
    xi: np.ndarray
    reference: np.ndarray
    G_ref: np.ndarray
    step_index: int


@dataclass
class OUTrace:
    """OU path ``xi_0 .. xi_K`` with the reference segment active at each step.

    Indexing yields :class:`OUState` objects, so the trace behaves as a
    sequence of states without materializing them.
    """

    xi: np.ndarray
    references: list
    G_refs: list
    segment: np.ndarray

    def __len__(self) -> int:
        return int(self.xi.shape[0])

    def __getitem__(self, k: int) -> OUState:
        k = range(len(self))[k]
        m = int(self.segment[k])
        return OUState(self.xi[k], self.references[m], self.G_refs[m], k)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.xi, axis=1)


Source = Union[None, np.random.Generator, Sequence[NoiseRecord], NoiseStream]


def _source(bundle, hp, rng_or_replay, replica):
    """Return a callable ``k -> NoiseRecord`` (k counts from 0)."""
    if rng_or_replay is None:
        s = NoiseStream(make_rng(hp.seed, replica), bundle.n, bundle.d, hp)
        return lambda k: s.next()
    if isinstance(rng_or_replay, np.random.Generator):
        s = NoiseStream(rng_or_replay, bundle.n, bundle.d, hp)
        return lambda k: s.next()
    if isinstance(rng_or_replay, NoiseStream):
        return lambda k: rng_or_replay.next()
    log = rng_or_replay
    return lambda k: log[k]


def _linearization(bundle, theta_star):
    J = bundle.model.jacobian(theta_star)
    G = obj.gauss_newton(bundle, theta_star)
    return J, G


def _drive(J, rec, eta):
    if rec.draws is None:
        return np.zeros(J.shape[1])
    return (eta / rec.batch.shape[0]) * (rec.draws @ J[rec.batch])


def ou_chained(bundle, references: Sequence, hp: HyperParams, rng_or_replay: Source = None,
               replica: int = 0, beta: Optional[float] = None) -> OUTrace:
    """OU recursion whose linearization switches between reference points.

    ``references`` is a sequence of ``(theta*_m, tau_m)``; on segment ``m``
    the matrix ``G`` and the drive gradients are those of ``theta*_m`` and
    ``xi`` carries over between segments. ``beta`` (default ``hp.beta``)
    adds the heavy-ball term ``beta (xi_k - xi_{k-1})``.
    """
    beta = hp.beta if beta is None else beta
    refs = [np.array(t, dtype=float) for t, _ in references]
    taus = [int(tau) for _, tau in references]
    horizon = sum(taus)
    d = bundle.d
    src = _source(bundle, hp, rng_or_replay, replica)
    xi = np.zeros((horizon + 1, d))
    seg = np.zeros(horizon + 1, dtype=int)
    Gs = []
    cur = np.zeros(d)
    prev = cur
    k = 0
    for m, (ref, tau) in enumerate(zip(refs, taus)):
        J, G = _linearization(bundle, ref)
        Gs.append(G)
        M = np.eye(d) - hp.eta * G
        if k == 0:
            seg[0] = m
        for _ in range(tau):
            new = M @ cur + _drive(J, src(k), hp.eta)
            if beta != 0.0:
                new = new + beta * (cur - prev)
            prev, cur = cur, new
            k += 1
            xi[k] = cur
            seg[k] = m
    return OUTrace(xi, refs, Gs, seg)


def ou_run(bundle, theta_star, hp: HyperParams, horizon: int, rng_or_replay: Source = None,
           replica: int = 0) -> OUTrace:
    """Plain OU process around a single reference point (``beta`` ignored)."""
    return ou_chained(bundle, [(theta_star, horizon)], hp, rng_or_replay, replica, beta=0.0)


def ou_momentum(bundle, theta_star, hp: HyperParams, horizon: int, rng_or_replay: Source = None,
                replica: int = 0) -> OUTrace:
    """Heavy-ball OU process on ``(xi_k, xi_{k-1})`` with ``xi_{-1} = xi_0 = 0``."""
    return ou_chained(bundle, [(theta_star, horizon)], hp, rng_or_replay, replica, beta=hp.beta)


def stationary_cov(samples, burn_in: int) -> np.ndarray:
    """Average of ``xi xi^T`` after dropping ``burn_in`` steps of every replica.

    ``samples`` is an array of shape ``(K, d)`` or a list of such arrays.
    """
    arrs = [np.asarray(samples, dtype=float)] if not isinstance(samples, (list, tuple)) else \
        [np.asarray(s, dtype=float) for s in samples]
    total, count = None, 0
    for a in arrs:
        if a.ndim == 1:
            a = a[:, None]
        if a.shape[0] <= burn_in:
            raise InsufficientSamples(f"{a.shape[0]} samples do not exceed burn-in {burn_in}")
        x = a[burn_in:]
        s = x.T @ x
        total = s if total is None else total + s
        count += x.shape[0]
    if total is None:
        raise InsufficientSamples("no samples")
    C = total / count
    return 0.5 * (C + C.T)


def plain_stationary_cov(G, eta: float, lam: float, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """``lam Pi_G (2 - eta G)^{-1}``."""
    spec = eig_sym(check_symmetric(G, "G"))
    mask = spec.range_mask(rank_tol)
    vals = np.where(mask, lam / (2.0 - eta * spec.eigenvalues), 0.0)
    U = spec.basis
    return (U * vals) @ U.T


def default_burn_in(G, eta: float, rank_tol: float = DEFAULT_RANK_TOL) -> int:
    """``ceil(5 / (eta lambda_min^+))``, five mixing times of the slowest mode."""
    spec = eig_sym(G)
    pos = spec.eigenvalues[spec.range_mask(rank_tol) & (spec.eigenvalues > 0)]
    if pos.size == 0:
        return 0
    return int(math.ceil(5.0 / (eta * float(np.min(pos)))))


def momentum_block(G, eta: float, beta: float) -> np.ndarray:
    """``A = [[I - eta G + beta I, -beta I], [I, 0]]``."""
    G = check_symmetric(G, "G")
    d = G.shape[0]
    I = np.eye(d)
    return np.block([[I - eta * G + beta * I, -beta * I], [I, np.zeros((d, d))]])


def momentum_stationary_cov(G, eta: float, beta: float, lam: float, method: str = "closed-form",
                            rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Stationary covariance of ``(xi_k, xi_{k-1})``, shape ``(2d, 2d)``.

    The drive has covariance ``(1 - beta) eta lam G`` with ``lam`` the
    momentum-adjusted strength. ``closed-form`` solves each 2x2 eigen-block:
    ``Var = lam / (2 - eta l/(1+beta))`` and
    ``Cov(xi_k, xi_{k-1}) = Var (1 + beta - eta l)/(1 + beta)``.
    ``lyapunov`` solves ``S = A S A^T + (1-beta) eta lam J G J^T`` with
    :func:`scipy.linalg.solve_discrete_lyapunov` (needs ``G`` nonsingular).
    """
    G = check_symmetric(G, "G")
    d = G.shape[0]
    if method == "lyapunov":
        A = momentum_block(G, eta, beta)
        Q = np.zeros((2 * d, 2 * d))
        Q[:d, :d] = (1.0 - beta) * eta * lam * G
        S = sla.solve_discrete_lyapunov(A, Q)
        return 0.5 * (S + S.T)
    if method != "closed-form":
        raise ValueError(f"unknown method {method!r}")
    spec = eig_sym(G)
    mask = spec.range_mask(rank_tol)
    l = spec.eigenvalues
    var = np.where(mask, lam / (2.0 - eta * l / (1.0 + beta)), 0.0)
    cross = var * (1.0 + beta - eta * l) / (1.0 + beta)
    U = spec.basis
    V = (U * var) @ U.T
    C = (U * cross) @ U.T
    return np.block([[V, C], [C, V]])


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------

@dataclass
class CouplingReport:
    steps: np.ndarray
    residual: np.ndarray
    xi_norm: np.ndarray
    phi_dist: np.ndarray
    lam: float
    loss_at_ref: float
    warnings: list = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual)) if self.residual.size else 0.0

    @property
    def max_phi_dist(self) -> float:
        return float(np.max(self.phi_dist)) if self.phi_dist.size else 0.0

    @property
    def predicted_scale(self) -> float:
        return math.sqrt(self.lam)

    def to_csv(self, path):
        return write_csv(path, ["step", "residual", "xi_norm", "phi_dist"],
                         zip(self.steps, self.residual, self.xi_norm, self.phi_dist))

    def summary(self) -> dict:
        return {"lambda": self.lam, "max_residual": self.max_residual, "max_phi_dist": self.max_phi_dist,
                "predicted_scale": self.predicted_scale, "loss_at_ref": self.loss_at_ref,
                "warnings": list(self.warnings)}


def coupling_experiment(bundle, theta_star, delta0, hp: HyperParams, horizon: int, *,
                        replica: int = 0, phi: Optional[np.ndarray] = None,
                        reg_cfg: Optional[RegConfig] = None) -> CouplingReport:
    """Residual ``||theta_k - xi_k - Phi_k(theta* + Delta_0)||`` for ``k = 1..horizon``.

    SGD starts at ``theta* + Delta_0`` and records its noise; the OU process
    around ``theta*`` replays that noise; ``Phi`` is gradient descent on
    ``L + lam R`` from the same start. A precomputed ``phi`` path (shape
    ``(horizon+1, d)``) can be passed when several seeds share it.
    """
    theta_star = np.asarray(theta_star, dtype=float)
    start = theta_star + np.asarray(delta0, dtype=float)
    hpk = HyperParams(**{**hp.to_dict(), "T": int(horizon)})
    cfg = reg_cfg if reg_cfg is not None else hpk.reg_config(bundle.alpha)
    warnings = []
    L0 = obj.loss(bundle, theta_star)
    if cfg.lam > 0 and L0 > cfg.lam ** 1.5:
        warnings.append(f"L(theta*) = {L0:.3e} exceeds lambda^1.5 = {cfg.lam ** 1.5:.3e}")
    traj = run(bundle, start, hpk, 1, keep_noise=True, diagnostics=False, replica=replica, reg_cfg=cfg)
    ou = ou_run(bundle, theta_star, hpk, horizon, traj.noise_log)
    if phi is None:
        phi = run_phi(bundle, start, cfg, horizon)
    phi = np.asarray(phi)
    if phi.shape != (horizon + 1, bundle.d):
        raise ValueError("phi path has the wrong shape")
    th = traj.iterates
    res = np.linalg.norm(th - ou.xi - phi, axis=1)[1:]
    pd = np.linalg.norm(th - phi, axis=1)[1:]
    return CouplingReport(np.arange(1, horizon + 1), res, ou.norms[1:], pd, cfg.lam, L0, warnings)


@dataclass(frozen=True)
class EpsGammaVerdict:
    satisfied: bool
    witness: Optional[np.ndarray]
    steps: int
    scaled_grad_norm: float
    distance: float


def eps_gamma_check(bundle, theta, cfg: RegConfig, eps: float, gamma: float,
                    search_budget: int = 10000) -> EpsGammaVerdict:
    """Search for a certificate that ``theta`` is (eps, gamma)-stationary for ``L~/lam``.

    Gradient descent on ``L~`` from ``theta`` visits candidate points; the
    verdict is satisfied at the first visited point with
    ``||grad L~|| / lam <= eps`` and ``||point - theta|| <= gamma``. Any
    witness for ``(eps, gamma)`` is a witness for larger values, so the
    verdict is monotone in both. "Not found" is not a proof of the converse.
    """
    if cfg.lam <= 0:
        raise ValueError("eps_gamma_check needs lambda > 0")
    theta = np.asarray(theta, dtype=float)
    x = theta.copy()
    last_gn, last_dist = math.inf, 0.0
    for k in range(int(search_budget) + 1):
        _, g = reg_loss(bundle, x, cfg)
        gn = float(np.linalg.norm(g)) / cfg.lam
        dist = float(np.linalg.norm(x - theta))
        last_gn, last_dist = gn, dist
        if gn <= eps and dist <= gamma:
            return EpsGammaVerdict(True, x, k, gn, dist)
        if k == search_budget:
            break
        step = cfg.eta * g
        if not np.any(step):
            break
        x = x - step
    return EpsGammaVerdict(False, None, k, last_gn, last_dist)
