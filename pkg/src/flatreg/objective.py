"""Losses assembled from per-sample models, and their derivative objects.

Regression uses the square loss ``0.5 (f_i - y_i)^2``. Classification uses
a label-smoothed margin loss ``lbar(y_i f_i) - lbar(c)`` where
``lbar(x) = p l(-x) + (1-p) l(x)`` and ``c`` minimizes ``lbar``, so the
minimum value of every sample loss is zero.

Both kinds reduce to a scalar link ``phi_i(f)`` per sample; with
``phi'`` and ``phi''`` the loss Hessian is
``(1/n) sum phi'' g_i g_i^T + (1/n) sum phi' H_i``. The first sum is the
(generalized) Gauss-Newton matrix ``G`` and the second the residual term ``E``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import InvalidP
from .modelzoo import Dataset, ModelHandle
from .spectral import check_symmetric, eig_sym

__all__ = [
    "LossBundle",
    "LossConstants",
    "HessianSplit",
    "QuadApproxReport",
    "regression_bundle",
    "classification_bundle",
    "loss",
    "grad",
    "hessian",
    "gauss_newton",
    "hessian_split",
    "third_form",
    "third_contract",
    "margin_loss",
    "smoothed_loss",
    "loss_constants",
    "numeric_minimizer",
    "verify_quadratic_approx",
    "LOSS_KINDS",
]

LOSS_KINDS = ("logistic", "exponential", "square")


# ---------------------------------------------------------------------------
# scalar margin losses
# ---------------------------------------------------------------------------

def margin_loss(kind: str, x, order: int = 0):
    """``l(x)`` or its derivative of the given order for a margin loss."""
    x = np.asarray(x, dtype=float)
    if kind == "logistic":
        if order == 0:
            return np.logaddexp(0.0, -x)
        if order == 1:
            return -_expit(-x)
        if order == 2:
            s = _expit(x)
            return s * (1.0 - s)
    elif kind == "exponential":
        if order == 0:
            return np.exp(-x)
        if order == 1:
            return -np.exp(-x)
        if order == 2:
            return np.exp(-x)
    elif kind == "square":
        if order == 0:
            return 0.5 * (1.0 - x) ** 2
        if order == 1:
            return x - 1.0
        if order == 2:
            return np.ones_like(x)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    raise ValueError(f"unsupported derivative order {order}")


def _expit(x):
    with np.errstate(over="ignore"):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def smoothed_loss(kind: str, p: float, x, order: int = 0):
    """``lbar(x) = p l(-x) + (1-p) l(x)`` and its derivatives."""
    x = np.asarray(x, dtype=float)
    sign = (-1.0) ** order
    return p * sign * margin_loss(kind, -x, order) + (1.0 - p) * margin_loss(kind, x, order)


@dataclass(frozen=True)
class LossConstants:
    loss_kind: str
    p: float
    c: float
    sigma2: float
    alpha: float


def _check_p(p):
    if not (0.0 < p < 1.0) or not math.isfinite(p):
        raise InvalidP(f"p must lie in (0, 1), got {p}")


def loss_constants(loss_kind: str, p: float) -> LossConstants:
    """Closed-form minimizer ``c``, noise strength ``sigma^2`` and curvature ``alpha``."""
    _check_p(p)
    q = 1.0 - p
    if loss_kind == "logistic":
        c = math.log(q / p)
        return LossConstants(loss_kind, p, c, p * q, p * q)
    if loss_kind == "exponential":
        c = 0.5 * math.log(q / p)
        return LossConstants(loss_kind, p, c, 1.0, 2.0 * math.sqrt(p * q))
    if loss_kind == "square":
        return LossConstants(loss_kind, p, 1.0 - 2.0 * p, 4.0 * p * q, 1.0)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def numeric_minimizer(loss_kind: str, p: float, xtol: float = 1e-15) -> LossConstants:
    """Constants computed without the closed forms.

    A golden-section search on ``lbar`` gives a bracket; because the value
    is flat near the minimum that search is limited to about ``sqrt(eps)``,
    so the minimizer is then refined as the root of ``lbar'`` with Brent's
    method. ``sigma^2`` and ``alpha`` are evaluated at the numeric ``c``.
    """
    _check_p(p)
    f = lambda x: float(smoothed_loss(loss_kind, p, x))
    df = lambda x: float(smoothed_loss(loss_kind, p, x, 1))
    res = optimize.minimize_scalar(f, bracket=(-1.0, 1.0), method="golden", tol=1e-10)
    x0 = float(res.x)
    lo, hi, step = x0 - 1e-3, x0 + 1e-3, 1e-3
    while df(lo) > 0:
        step *= 2
        lo = x0 - step
    step = 1e-3
    while df(hi) < 0:
        step *= 2
        hi = x0 + step
    c = optimize.brentq(df, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)
    lp = lambda x: float(margin_loss(loss_kind, x, 1))
    sigma2 = p * (1.0 - p) * (lp(c) + lp(-c)) ** 2
    alpha = float(smoothed_loss(loss_kind, p, c, 2))
    return LossConstants(loss_kind, p, c, sigma2, alpha)


@dataclass(frozen=True)
class QuadApproxReport:
    loss_kind: str
    p: float
    eps_q: float
    nu: float
    n_points: int

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.nu) and self.n_points > 0


def verify_quadratic_approx(loss_kind: str, p: float, x_grid=None, eps_q: float = 0.1,
                            exclude: float = 1e-4) -> QuadApproxReport:
    """Smallest ``nu`` with ``(x-c)^2 <= nu (lbar(x) - lbar(c))`` on the grid.

    Only grid points with ``lbar(x) - lbar(c) <= eps_q`` count. Points within
    ``exclude * max(1, |c|)`` of ``c`` are dropped since the difference of
    losses there is dominated by rounding.
    """
    k = loss_constants(loss_kind, p)
    c = k.c
    if x_grid is None:
        x_grid = c + np.linspace(-5.0, 5.0, 4001)
    x = np.asarray(x_grid, dtype=float)
    x = x[np.abs(x - c) > exclude * max(1.0, abs(c))]
    gap = smoothed_loss(loss_kind, p, x) - float(smoothed_loss(loss_kind, p, c))
    keep = gap <= eps_q
    x, gap = x[keep], gap[keep]
    if x.size == 0:
        return QuadApproxReport(loss_kind, p, eps_q, math.inf, 0)
    if np.any(gap <= 0):
        return QuadApproxReport(loss_kind, p, eps_q, math.inf, int(x.size))
    nu = float(np.max((x - c) ** 2 / gap))
    return QuadApproxReport(loss_kind, p, eps_q, nu, int(x.size))


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBundle:
    model: ModelHandle
    dataset: Dataset
    kind: str = "regression"
    loss_kind: Optional[str] = None
    p: Optional[float] = None
    constants: Optional[LossConstants] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.dataset) != self.model.sample_count:
            raise ValueError("dataset length must equal the model's sample_count")
        y = self.dataset.targets
        if self.kind == "regression":
            if not np.all(np.isfinite(y)):
                raise ValueError("regression targets must be finite reals")
        elif self.kind == "classification":
            if not np.all(np.isin(y, (-1.0, 1.0))):
                raise ValueError("classification targets must be +1 or -1")
            _check_p(self.p)
            if self.loss_kind not in LOSS_KINDS:
                raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        else:
            raise ValueError(f"unknown bundle kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.model.sample_count

    @property
    def d(self) -> int:
        return self.model.param_dim

    @property
    def alpha(self) -> float:
        return 1.0 if self.constants is None else self.constants.alpha

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    # link derivatives evaluated at model outputs f (subset idx)
    def link(self, f, idx=None):
        """Per-sample loss value, first and second derivative with respect to ``f``."""
        y = self.dataset.targets if idx is None else self.dataset.targets[np.asarray(idx, dtype=int)]
        if self.kind == "regression":
            r = f - y
            return 0.5 * r * r, r, np.ones_like(r)
        m = y * f
        base = float(smoothed_loss(self.loss_kind, self.p, self.constants.c))
        val = smoothed_loss(self.loss_kind, self.p, m) - base
        d1 = y * smoothed_loss(self.loss_kind, self.p, m, 1)
        d2 = smoothed_loss(self.loss_kind, self.p, m, 2)
        return val, d1, d2


def regression_bundle(model: ModelHandle, dataset: Dataset) -> LossBundle:
    return LossBundle(model, dataset, "regression")


def classification_bundle(model: ModelHandle, dataset: Dataset, loss_kind: str, p: float) -> LossBundle:
    return LossBundle(model, dataset, "classification", loss_kind, float(p), loss_constants(loss_kind, p))


def loss(bundle: LossBundle, theta) -> float:
    f = bundle.model.values(theta)
    return float(np.mean(bundle.link(f)[0]))


def grad(bundle: LossBundle, theta) -> np.ndarray:
    m = bundle.model
    _, d1, _ = bundle.link(m.values(theta))
    return (d1 @ m.jacobian(theta)) / bundle.n


def _parts(bundle, theta):
    m = bundle.model
    f = m.values(theta)
    _, d1, d2 = bundle.link(f)
    J = m.jacobian(theta)
    G = (J.T * d2) @ J / bundle.n
    E = np.einsum("i,ijk->jk", d1, m.hessians(theta)) / bundle.n
    return 0.5 * (G + G.T), 0.5 * (E + E.T)


def hessian(bundle: LossBundle, theta) -> np.ndarray:
    G, E = _parts(bundle, theta)
    return G + E


def gauss_newton(bundle: LossBundle, theta) -> np.ndarray:
    """``(1/n) sum phi''_i g_i g_i^T``; for regression this is ``(1/n) sum g_i g_i^T``."""
    return _parts(bundle, theta)[0]


@dataclass(frozen=True)
class HessianSplit:
    """``hess L = G + E`` with the residual-term norm and two bounds on it.

    ``bound`` is ``sqrt(2 rho_f L)``. ``derived_bound`` is ``rho_f sqrt(2 L)``,
    which is what Cauchy-Schwarz on ``(1/n) sum_i r_i H_i`` gives; the two
    coincide at ``rho_f = 1`` and ``bound`` is the smaller one when
    ``rho_f > 1``.
    """

    G: np.ndarray
    E: np.ndarray
    norm_E: float
    bound: Optional[float]
    derived_bound: Optional[float]

    @property
    def holds(self) -> Optional[bool]:
        return None if self.bound is None else self.norm_E <= self.bound * (1 + 1e-12) + 1e-15

    @property
    def holds_derived(self) -> Optional[bool]:
        if self.derived_bound is None:
            return None
        return self.norm_E <= self.derived_bound * (1 + 1e-12) + 1e-15


def hessian_split(bundle: LossBundle, theta, rho_f: Optional[float] = None) -> HessianSplit:
    """Gauss-Newton / residual split with the residual-norm bound.

    ``rho_f`` defaults to the model's analytic value; bounds are ``None`` for
    classification bundles or when no analytic ``rho_f`` is known.
    """
    G, E = _parts(bundle, theta)
    normE = float(np.max(np.abs(np.linalg.eigvalsh(E)))) if E.size else 0.0
    rho = bundle.model.smoothness.rho_f if rho_f is None else rho_f
    if rho is None or bundle.is_classification:
        return HessianSplit(G, E, normE, None, None)
    L = max(loss(bundle, theta), 0.0)
    return HessianSplit(G, E, normE, math.sqrt(2.0 * rho * L), rho * math.sqrt(2.0 * L))


_CBRT_EPS = np.cbrt(np.finfo(float).eps)


def third_form(bundle: LossBundle, theta, v) -> np.ndarray:
    """``sum_jk d_i d_j d_k L(theta) v_j v_k`` by central differences of the Hessian."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.zeros_like(theta)
    h = _CBRT_EPS * max(1.0, float(np.linalg.norm(theta))) / max(1.0, nv)
    Hp = hessian(bundle, theta + h * v)
    Hm = hessian(bundle, theta - h * v)
    return (Hp - Hm) @ v / (2.0 * h)


def third_contract(bundle: LossBundle, theta, M, spectrum=None) -> np.ndarray:
    """``sum_jk d_i d_j d_k L(theta) M_jk`` via the eigendecomposition of ``M``."""
    spec = eig_sym(check_symmetric(M, "M")) if spectrum is None else spectrum
    out = np.zeros(bundle.d)
    for mu, u in zip(spec.eigenvalues, spec.basis.T):
        if mu != 0.0:
            out += mu * third_form(bundle, theta, u)
    return out
