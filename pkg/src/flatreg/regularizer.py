"""The implicit regularizer, its gradient and the arbitrary-noise shape matrix.

For step size ``eta`` and momentum ``beta`` the regularizer is

    R(theta) = -((1+beta) / (2 eta alpha)) * sum_i log(1 - eta lam_i / (2 (1+beta)))

over the eigenvalues ``lam_i`` of the loss Hessian. ``alpha`` is 1 for
regression and the curvature constant of the smoothed loss for
classification. Its gradient is ``(1/(2 alpha)) * D3L[(2 - eta H/(1+beta))^{-1}]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import objective as obj
from .errors import DomainError, EdgeOfStability, NotPSD, StepTooLarge
from .spectral import DEFAULT_RANK_TOL, Spectrum, check_symmetric, eig_sym

__all__ = [
    "RegConfig",
    "lambda_eff",
    "reg_value",
    "reg_value_from_eigs",
    "reg_grad",
    "reg_loss",
    "Sharpness",
    "normalized_sharpness",
    "normalized_sharpness_from_eigs",
    "ShapeMatrix",
    "shape_matrix",
    "reg_S",
]


def lambda_eff(eta: float, sigma: float, B: int, beta: float = 0.0) -> float:
    """Effective regularization strength ``eta sigma^2 / (B (1-beta))``."""
    if B < 1:
        raise ValueError("batch size must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    return eta * sigma * sigma / (B * (1.0 - beta))


@dataclass(frozen=True)
class RegConfig:
    eta: float
    lam: float
    beta: float = 0.0
    nu: float = 0.1
    alpha: float = 1.0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if not 0.0 < self.nu < 1.0:
            raise ValueError("nu must lie in (0, 1)")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @classmethod
    def from_noise(cls, eta: float, sigma: float, B: int, beta: float = 0.0, nu: float = 0.1,
                   alpha: float = 1.0) -> "RegConfig":
        return cls(eta, lambda_eff(eta, sigma, B, beta), beta, nu, alpha)

    @property
    def edge(self) -> float:
        """Largest eigenvalue the regularizer tolerates, ``2 (1+beta) / eta``."""
        return 2.0 * (1.0 + self.beta) / self.eta

    def margin_ok(self, lam_max: float) -> bool:
        return self.eta * lam_max <= 2.0 * (1.0 + self.beta) - self.nu


def reg_value_from_eigs(eigs, eta: float, beta: float = 0.0, alpha: float = 1.0) -> float:
    lam = np.asarray(eigs, dtype=float)
    s = 2.0 * (1.0 + beta)
    x = eta * lam / s
    if np.any(x >= 1.0):
        top = float(np.max(lam))
        raise EdgeOfStability(
            f"eta * lambda_max = {eta * top:.6g} reaches 2(1+beta) = {s:.6g}", eigenvalue=top, eta=eta)
    return float(-(1.0 + beta) / (2.0 * eta * alpha) * np.sum(np.log1p(-x)))


def reg_value(bundle, theta, cfg: RegConfig) -> float:
    H = obj.hessian(bundle, theta)
    return reg_value_from_eigs(np.linalg.eigvalsh(H), cfg.eta, cfg.beta, cfg.alpha)


_CBRT_EPS = np.cbrt(np.finfo(float).eps)


def reg_grad(bundle, theta, cfg: RegConfig, method: str = "contraction") -> np.ndarray:
    """Gradient of the regularizer.

    ``contraction`` contracts the third derivative with
    ``(2 - eta H/(1+beta))^{-1} / (2 alpha)`` along the Hessian eigenvectors;
    ``finite-diff`` differences :func:`reg_value` coordinate by coordinate.
    """
    theta = np.asarray(theta, dtype=float)
    if method == "contraction":
        spec = eig_sym(obj.hessian(bundle, theta))
        reg_value_from_eigs(spec.eigenvalues, cfg.eta, cfg.beta, cfg.alpha)  # edge check
        mu = 1.0 / (2.0 - cfg.eta * spec.eigenvalues / (1.0 + cfg.beta))
        weights = Spectrum(mu / (2.0 * cfg.alpha), spec.basis)
        return obj.third_contract(bundle, theta, None, spectrum=weights)
    if method == "finite-diff":
        g = np.empty_like(theta)
        for j in range(theta.size):
            h = _CBRT_EPS * max(1.0, abs(theta[j]))
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            g[j] = (reg_value(bundle, tp, cfg) - reg_value(bundle, tm, cfg)) / (tp[j] - tm[j])
        return g
    raise ValueError(f"unknown method {method!r}")


def reg_loss(bundle, theta, cfg: RegConfig, method: str = "contraction") -> tuple[float, np.ndarray]:
    """Value and gradient of ``L + lambda R``; at ``lambda = 0`` R is not evaluated."""
    L = obj.loss(bundle, theta)
    g = obj.grad(bundle, theta)
    if cfg.lam == 0.0:
        return L, g
    return L + cfg.lam * reg_value(bundle, theta, cfg), g + cfg.lam * reg_grad(bundle, theta, cfg, method)


@dataclass(frozen=True)
class Sharpness:
    value: float
    lambda1: float
    eta: float
    nu: float
    degenerate: bool


def normalized_sharpness_from_eigs(eigs, nu: float) -> Sharpness:
    """``R / (log(2/nu) / 4)`` at ``eta = (2-nu)/lambda_1``.

    The top eigenvalue alone contributes ``lambda_1 log(2/nu) / (2 (2-nu))``
    to ``R``, so dividing by ``log(2/nu)/4`` tends to ``lambda_1`` (or
    ``k lambda_1`` for a ``k``-fold top eigenvalue) as ``nu -> 0``, matching
    the ``(1/4) tr`` normalization of the small-step limit.
    """
    lam = np.sort(np.asarray(eigs, dtype=float))[::-1]
    if not 0.0 < nu < 2.0:
        raise ValueError("nu must lie in (0, 2)")
    l1 = float(lam[0])
    if l1 <= 0:
        raise DomainError("normalized sharpness needs a positive top eigenvalue")
    eta = (2.0 - nu) / l1
    R = reg_value_from_eigs(lam, eta)
    degenerate = lam.size > 1 and (l1 - float(lam[1])) <= 1e-8 * l1
    return Sharpness(4.0 * R / math.log(2.0 / nu), l1, eta, nu, bool(degenerate))


def normalized_sharpness(bundle, theta, nu: float) -> Sharpness:
    return normalized_sharpness_from_eigs(np.linalg.eigvalsh(obj.hessian(bundle, theta)), nu)


@dataclass(frozen=True)
class ShapeMatrix:
    S: np.ndarray
    residual: float


def shape_matrix(H, Sigma, eta: float, lam: float, rank_tol: float = DEFAULT_RANK_TOL) -> ShapeMatrix:
    """Fixed point of ``S -> (I - eta H) S (I - eta H) + eta lam P Sigma P`` on span(H).

    Solved in the eigenbasis of ``H``: ``S_ij = lam Sigma_ij / (l_i + l_j - eta l_i l_j)``
    with entries outside span(H) set to zero.
    """
    H = check_symmetric(H, "H")
    Sigma = check_symmetric(Sigma, "Sigma")
    spec = eig_sym(H)
    l = spec.eigenvalues
    scale = max(1.0, float(np.max(np.abs(l)))) if l.size else 1.0
    if l.size and l[-1] < -1e-12 * scale:
        raise NotPSD(f"H has eigenvalue {l[-1]:.3e}")
    if l.size and eta * l[0] >= 2.0:
        raise StepTooLarge(f"eta * lambda_max = {eta * l[0]:.6g} >= 2")
    mask = spec.range_mask(rank_tol)
    U = spec.basis
    Sig_e = U.T @ Sigma @ U
    li, lj = l[:, None], l[None, :]
    both = mask[:, None] & mask[None, :]
    denom = np.where(both, li + lj - eta * li * lj, 1.0)
    S_e = np.where(both, lam * Sig_e / denom, 0.0)
    S = U @ S_e @ U.T
    S = 0.5 * (S + S.T)
    P = U[:, mask] @ U[:, mask].T
    M = np.eye(l.size) - eta * H
    res = float(np.linalg.norm(M @ S @ M + eta * lam * P @ Sigma @ P - S))
    return ShapeMatrix(S, res)


def reg_S(bundle, theta, S, method: str = "contraction") -> tuple[float, np.ndarray]:
    """``R_S = <S, hess L>`` and its gradient ``D3L[S]``."""
    S = check_symmetric(S, "S")
    theta = np.asarray(theta, dtype=float)
    value = float(np.sum(S * obj.hessian(bundle, theta)))
    if method == "contraction":
        return value, obj.third_contract(bundle, theta, S)
    if method == "finite-diff":
        g = np.empty_like(theta)
        for j in range(theta.size):
            h = _CBRT_EPS * max(1.0, abs(theta[j]))
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            g[j] = (np.sum(S * obj.hessian(bundle, tp)) - np.sum(S * obj.hessian(bundle, tm))) / (tp[j] - tm[j])
        return value, g
    raise ValueError(f"unknown method {method!r}")
