"""Dense symmetric linear algebra and spectral matrix functions.

Everything here works on plain ``numpy`` arrays. A "symmetric matrix" is any
square array passing :func:`check_symmetric`; functions of a matrix are
computed through a full eigendecomposition, which is exact enough at the
dimensions this package targets (d up to a few hundred).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NonSymmetric, StepTooLarge

__all__ = [
    "Spectrum",
    "check_symmetric",
    "eig_sym",
    "spectral_apply",
    "projector_onto_range",
    "LemmaCheck",
    "ContractionReport",
    "contraction_report",
    "DEFAULT_RANK_TOL",
]

DEFAULT_RANK_TOL = 1e-10


def check_symmetric(M, name: str = "matrix") -> np.ndarray:
    """Return ``M`` as a float array after validating symmetry.

    The tolerance is ``1e-12 * max(1, ||M||_F)`` entrywise.
    """
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NonSymmetric(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonSymmetric(f"{name} has non-finite entries")
    tol = 1e-12 * max(1.0, float(np.linalg.norm(A)))
    if A.size and np.max(np.abs(A - A.T)) > tol:
        raise NonSymmetric(f"{name} is not symmetric (max asymmetry {np.max(np.abs(A - A.T)):.3e})")
    return A


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues in descending order with the matching orthonormal basis.

    ``basis[:, a]`` is the eigenvector of ``eigenvalues[a]``.
    """

    eigenvalues: np.ndarray
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        U = self.basis
        return (U * self.eigenvalues) @ U.T

    def apply(self, h: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        vals = _eval_scalar(h, self.eigenvalues)
        U = self.basis
        out = (U * vals) @ U.T
        return 0.5 * (out + out.T)

    def range_mask(self, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
        lam = self.eigenvalues
        if lam.size == 0:
            return np.zeros(0, dtype=bool)
        scale = np.max(np.abs(lam))
        if scale == 0.0:
            return np.zeros(lam.shape, dtype=bool)
        return np.abs(lam) > rank_tol * scale

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0]) if self.dim else 0.0


def eig_sym(M) -> Spectrum:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Uses LAPACK ``syevd`` via :func:`numpy.linalg.eigh` on the symmetrized
    input, so repeated calls on the same array give the same result.
    """
    A = check_symmetric(M)
    if A.shape[0] == 0:
        return Spectrum(np.zeros(0), np.zeros((0, 0)))
    w, U = np.linalg.eigh(0.5 * (A + A.T))
    order = np.argsort(-w, kind="stable")
    return Spectrum(w[order], U[:, order])


def _eval_scalar(h, lam: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        try:
            vals = np.asarray(h(lam), dtype=float)
        except (ValueError, ZeroDivisionError) as exc:
            raise DomainError(f"scalar function failed on the spectrum: {exc}") from exc
    if vals.shape != lam.shape:
        vals = np.broadcast_to(vals, lam.shape).astype(float)
    if not np.all(np.isfinite(vals)):
        bad = lam[~np.isfinite(vals)]
        raise DomainError(f"scalar function undefined at eigenvalue(s) {bad.tolist()}")
    return vals


def spectral_apply(M, h: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Return ``U diag(h(lambda)) U^T`` for symmetric ``M``.

    ``h`` must accept an array of eigenvalues. Non-finite outputs (for
    example ``log`` of a non-positive number) raise :class:`DomainError`.
    """
    return eig_sym(M).apply(h)


def projector_onto_range(M, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthogonal projector onto eigenvectors with ``|lambda| > rank_tol * max|lambda|``."""
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    spec = eig_sym(M)
    U = spec.basis[:, spec.range_mask(rank_tol)]
    P = U @ U.T
    return 0.5 * (P + P.T)


# ---------------------------------------------------------------------------
# Weak contraction bounds
# ---------------------------------------------------------------------------

LEMMAS = ("G", "power", "sum1", "sumsq", "sumsqapart", "sumG")


@dataclass(frozen=True)
class LemmaCheck:
    """Measured left-hand side and explicit bound for one lemma, per tau."""

    name: str
    taus: np.ndarray
    measured: np.ndarray
    bound: np.ndarray

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(self.measured > self.bound))

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def worst_ratio(self) -> float:
        """Largest measured/bound ratio (0 when every bound is infinite or lhs is 0)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(self.bound > 0, self.measured / self.bound, np.where(self.measured > 0, np.inf, 0.0))
        return float(np.max(r)) if r.size else 0.0


@dataclass(frozen=True)
class ContractionReport:
    eta: float
    nu: float
    rank: int
    n_probes: int
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    @property
    def violations(self) -> int:
        return sum(c.violations for c in self.checks.values())


def contraction_report(G, eta: float, nu: float, tau_max: int, probes: Sequence,
                       rank_tol: float = DEFAULT_RANK_TOL) -> ContractionReport:
    """Evaluate the six weak-contraction bounds for ``tau = 1..tau_max``.

    With ``r = rank(G)``, ``n = len(probes)`` and ``M = I - eta G`` the bounds
    checked are

    ========== ==================================================== =====================
    name       measured quantity                                    bound
    ========== ==================================================== =====================
    G          ``||M^tau G||``                                      ``1/(eta nu tau)``
    power      ``max_i ||M^tau g_i||``                              ``sqrt(n r/(2 eta nu tau))``
    sum1       ``sum_{k<tau} ||M^k g_{i_k}||``                      ``sqrt(tau n r/(eta nu))``
    sumsq      ``sum_{k<tau} ||M^k g_{i_k}||^2``                    ``n r/(eta nu)``
    sumsqapart ``sum_{k<tau} ||M^k g_{i_k}|| ||M^k g_{j_k}||``      ``n r/(eta nu)``
    sumG       ``sum_{k<tau} ||M^k G||``                            ``r (2-nu)/(eta nu)``
    ========== ==================================================== =====================

    The constants follow from ``lambda |1-eta lambda|^{2t} <= 1/(2 eta nu t)``,
    ``sum_k lambda (1-eta lambda)^{2k} <= 1/(eta nu)`` on the spectrum, and
    ``g_i g_i^T <= n G`` when ``G = (1/n) sum_i g_i g_i^T``. For the sums the
    index sequences are adversarial: ``i_k`` maximizes the summand at every
    ``k`` and ``j_k`` cycles through the probes.
    """
    G = check_symmetric(G, "G")
    d = G.shape[0]
    spec = eig_sym(G)
    lam = spec.eigenvalues
    lmax = max(float(lam[0]), 0.0) if d else 0.0
    if eta * lmax > 2.0 - nu + 1e-12:
        raise StepTooLarge(f"eta*lambda_max = {eta * lmax:.6g} exceeds 2 - nu = {2.0 - nu:.6g}")
    if tau_max < 1:
        raise ValueError("tau_max must be >= 1")
    P = np.atleast_2d(np.asarray(probes, dtype=float))
    if P.size == 0:
        P = np.zeros((0, d))
    n = P.shape[0]
    mask = spec.range_mask(rank_tol)
    r = int(np.count_nonzero(mask))
    lam_c = np.clip(lam, 0.0, None)
    decay = 1.0 - eta * lam_c  # (d,)

    taus = np.arange(1, tau_max + 1)
    ks = np.arange(0, tau_max + 1)
    # |1 - eta lambda|^k for k = 0..tau_max, shape (tau_max+1, d)
    with np.errstate(under="ignore"):
        powk = np.abs(decay)[None, :] ** ks[:, None]
    # ||M^k G|| = max_a |1-eta lam_a|^k lam_a
    normMG = np.max(powk * lam_c[None, :], axis=1) if d else np.zeros(ks.shape)

    if n:
        coef2 = (P @ spec.basis) ** 2  # (n, d), squared coordinates in the eigenbasis
        with np.errstate(under="ignore"):
            sq = (powk ** 2) @ coef2.T  # (tau_max+1, n): ||M^k g_i||^2
        norms = np.sqrt(np.clip(sq, 0.0, None))
        worst = np.max(norms, axis=1)
        cyc = norms[ks[:-1], ks[:-1] % n]
    else:
        worst = np.zeros(ks.shape)
        cyc = np.zeros(tau_max)

    scale = 1.0 / (eta * nu)
    nr = float(n * r)
    checks = {}
    checks["G"] = LemmaCheck("G", taus, normMG[1:], scale / taus)
    checks["power"] = LemmaCheck("power", taus, worst[1:], np.sqrt(nr * scale / (2.0 * taus)))
    w = worst[:-1]
    checks["sum1"] = LemmaCheck("sum1", taus, np.cumsum(w), np.sqrt(taus * nr * scale))
    checks["sumsq"] = LemmaCheck("sumsq", taus, np.cumsum(w ** 2), np.full(tau_max, nr * scale))
    checks["sumsqapart"] = LemmaCheck("sumsqapart", taus, np.cumsum(w * cyc), np.full(tau_max, nr * scale))
    checks["sumG"] = LemmaCheck("sumG", taus, np.cumsum(normMG[:-1]),
                                np.full(tau_max, r * (2.0 - nu) * scale))
    return ContractionReport(eta=float(eta), nu=float(nu), rank=r, n_probes=n, checks=checks)
