"""Discrete-time optimizers: label-noise SGD and its relatives, and the regularized trajectory.

Every stochastic step takes either a :class:`numpy.random.Generator` or a
:class:`NoiseRecord` to replay. Batches are drawn i.i.d. uniformly with
replacement. Generators come from :func:`make_rng`, a Philox counter-based
bit generator keyed by ``(seed, replica)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import objective as obj
from .errors import EdgeOfStability, NotPSD
from .io import write_csv
from .regularizer import RegConfig, lambda_eff, reg_loss, reg_value_from_eigs
from .spectral import eig_sym

__all__ = [
    "NOISE_KINDS",
    "HyperParams",
    "NoiseRecord",
    "Trajectory",
    "make_rng",
    "draw_noise",
    "NoiseStream",
    "noise_stream",
    "step_label_noise",
    "step_label_smoothing",
    "step_gaussian_cov",
    "step_heavy_ball",
    "run",
    "phi_step",
    "run_phi",
    "diagnostics_at",
]

NOISE_KINDS = ("rademacher-label", "gaussian-label", "label-flip", "gaussian-cov", "none")


@dataclass(frozen=True)
class HyperParams:
    eta: float
    sigma: float = 0.0
    B: int = 1
    beta: float = 0.0
    p: float = 0.2
    T: int = 1000
    nu: float = 0.1
    rank_tol: float = 1e-10
    seed: int = 0
    noise_kind: str = "rademacher-label"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if int(self.B) != self.B or self.B < 1:
            raise ValueError("B must be a positive integer")
        if int(self.T) != self.T or self.T < 0:
            raise ValueError("T must be a nonnegative integer")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"noise_kind must be one of {NOISE_KINDS}")
        if self.noise_kind == "label-flip" and not 0.0 < self.p < 1.0:
            raise ValueError("label-flip needs p in (0, 1)")

    @property
    def lam(self) -> float:
        return lambda_eff(self.eta, self.sigma, self.B, self.beta)

    def reg_config(self, alpha: float = 1.0) -> RegConfig:
        return RegConfig(self.eta, self.lam, self.beta, self.nu, alpha)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseRecord:
    """Randomness consumed by one step.

    ``batch`` holds sample indices; ``draws`` holds label noise, flip signs
    or standard normals depending on the step kind.
    """

    batch: Optional[np.ndarray]
    draws: Optional[np.ndarray]


RngState = Union[np.random.Generator, NoiseRecord]


def make_rng(seed: int, replica: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(replica),))))


def draw_noise(rng: np.random.Generator, n: int, hp: HyperParams) -> NoiseRecord:
    """Batch indices and label noise for one label-noise step."""
    idx = rng.integers(0, n, size=hp.B)
    if hp.noise_kind == "rademacher-label":
        eps = hp.sigma * (2.0 * rng.integers(0, 2, size=hp.B) - 1.0)
    elif hp.noise_kind == "gaussian-label":
        eps = hp.sigma * rng.standard_normal(hp.B)
    else:
        eps = None
    return NoiseRecord(idx, eps)


class NoiseStream:
    """Per-step :class:`NoiseRecord` values drawn from a generator in blocks.

    The draw layout depends only on ``(n, d, hp)``, so two consumers built
    from the same seed see the same noise. ``kind`` selects the record type:
    ``"label"`` (batch + label noise), ``"flip"`` (batch + flip signs) or
    ``"normal"`` (standard normals of dimension ``d``).
    """

    def __init__(self, rng: np.random.Generator, n: int, d: int, hp: HyperParams, block: int = 4096):
        self.rng, self.n, self.d, self.hp, self.block = rng, n, d, hp, int(block)
        if hp.noise_kind == "label-flip":
            self.kind = "flip"
        elif hp.noise_kind == "gaussian-cov":
            self.kind = "normal"
        else:
            self.kind = "label"
        self._buf: list = []
        self._pos = 0

    def _refill(self):
        rng, hp, m = self.rng, self.hp, self.block
        if self.kind == "normal":
            z = rng.standard_normal((m, self.d))
            self._buf = [NoiseRecord(None, z[j]) for j in range(m)]
        else:
            idx = rng.integers(0, self.n, size=(m, hp.B))
            if self.kind == "flip":
                draws = np.where(rng.random((m, hp.B)) < hp.p, -1.0, 1.0)
            elif hp.noise_kind == "rademacher-label":
                draws = hp.sigma * (2.0 * rng.integers(0, 2, size=(m, hp.B)) - 1.0)
            elif hp.noise_kind == "gaussian-label":
                draws = hp.sigma * rng.standard_normal((m, hp.B))
            else:
                draws = None
            self._buf = [NoiseRecord(idx[j], None if draws is None else draws[j]) for j in range(m)]
        self._pos = 0

    def next(self) -> NoiseRecord:
        if self._pos >= len(self._buf):
            self._refill()
        rec = self._buf[self._pos]
        self._pos += 1
        return rec


def noise_stream(bundle, hp: HyperParams, replica: int = 0) -> NoiseStream:
    """The stream :func:`run` consumes for ``(hp.seed, replica)``."""
    return NoiseStream(make_rng(hp.seed, replica), bundle.n, bundle.d, hp)


def _check_batch(bundle, hp):
    if hp.B > bundle.n:
        raise ValueError(f"batch size {hp.B} exceeds sample count {bundle.n}")


def step_label_noise(bundle, theta, hp: HyperParams, rng_state: RngState) -> tuple[np.ndarray, NoiseRecord]:
    """One step on ``(1/B) sum_i 0.5 (f_i - y_i - eps_i)^2`` over a sampled batch."""
    if bundle.is_classification:
        raise ValueError("label-noise SGD needs a regression bundle")
    rec = rng_state if isinstance(rng_state, NoiseRecord) else draw_noise(rng_state, bundle.n, hp)
    idx = rec.batch
    r = bundle.model.values(theta, idx) - bundle.dataset.targets[idx]
    if rec.draws is not None:
        r = r - rec.draws
    g = (r @ bundle.model.jacobian(theta, idx)) / idx.shape[0]
    return theta - hp.eta * g, rec


def step_label_smoothing(bundle, theta, hp: HyperParams, rng_state: RngState) -> tuple[np.ndarray, NoiseRecord]:
    """One step on ``(1/B) sum_i l(s_i y_i f_i)`` with ``s_i = -1`` w.p. ``p``."""
    if not bundle.is_classification:
        raise ValueError("label-smoothing SGD needs a classification bundle")
    if abs(bundle.p - hp.p) > 1e-15:
        raise ValueError("hyperparameter p must match the bundle's smoothing probability")
    if isinstance(rng_state, NoiseRecord):
        rec = rng_state
    else:
        idx = rng_state.integers(0, bundle.n, size=hp.B)
        s = np.where(rng_state.random(hp.B) < hp.p, -1.0, 1.0)
        rec = NoiseRecord(idx, s)
    idx, s = rec.batch, rec.draws
    sy = s * bundle.dataset.targets[idx]
    f = bundle.model.values(theta, idx)
    coef = sy * obj.margin_loss(bundle.loss_kind, sy * f, 1)
    g = (coef @ bundle.model.jacobian(theta, idx)) / idx.shape[0]
    return theta - hp.eta * g, rec


def _psd_sqrt(S):
    spec = eig_sym(S)
    lam = spec.eigenvalues
    scale = max(1.0, float(np.max(np.abs(lam)))) if lam.size else 1.0
    if lam.size and lam[-1] < -1e-12 * scale:
        raise NotPSD(f"noise covariance has eigenvalue {lam[-1]:.3e}")
    return spec.apply(lambda x: np.sqrt(np.clip(x, 0.0, None)))


def step_gaussian_cov(bundle, theta, hp: HyperParams, sigma_fn: Callable, rng_state: RngState
                      ) -> tuple[np.ndarray, NoiseRecord]:
    """Full-batch gradient step plus ``N(0, eta lam Sigma(theta))`` noise."""
    d = bundle.d
    rec = rng_state if isinstance(rng_state, NoiseRecord) else NoiseRecord(None, rng_state.standard_normal(d))
    root = _psd_sqrt(sigma_fn(theta))
    noise = np.sqrt(hp.eta * hp.lam) * (root @ rec.draws)
    return theta - hp.eta * obj.grad(bundle, theta) + noise, rec


def step_heavy_ball(step: Callable, theta, theta_prev, hp: HyperParams, rng_state: RngState):
    """Wrap ``step(theta, rng_state) -> (theta', rec)`` with ``+ beta (theta - theta_prev)``."""
    base, rec = step(theta, rng_state)
    if hp.beta == 0.0:
        return base, rec
    return base + hp.beta * (theta - theta_prev), rec


def _stepper(bundle, hp, sigma_fn):
    kind = hp.noise_kind
    if kind == "label-flip":
        return lambda th, rs: step_label_smoothing(bundle, th, hp, rs)
    if kind == "gaussian-cov":
        fn = sigma_fn if sigma_fn is not None else (lambda th: obj.gauss_newton(bundle, th))
        return lambda th, rs: step_gaussian_cov(bundle, th, hp, fn, rs)
    return lambda th, rs: step_label_noise(bundle, th, hp, rs)


DIAG_COLUMNS = ("loss", "R", "trH", "gradnorm", "top_eig")


def diagnostics_at(bundle, theta, cfg: RegConfig) -> tuple[float, float, float, float, float]:
    """``(loss, R, tr hess L, ||grad L||, lambda_max)``; ``R`` is ``nan`` past the edge."""
    H = obj.hessian(bundle, theta)
    lam = np.linalg.eigvalsh(H)
    try:
        R = reg_value_from_eigs(lam, cfg.eta, cfg.beta, cfg.alpha)
    except EdgeOfStability:
        R = float("nan")
    return (obj.loss(bundle, theta), R, float(np.trace(H)),
            float(np.linalg.norm(obj.grad(bundle, theta))), float(lam[-1]) if lam.size else 0.0)


@dataclass
class Trajectory:
    steps: np.ndarray
    iterates: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    noise_log: Optional[list] = None
    hp: Optional[HyperParams] = None

    def __len__(self) -> int:
        return int(self.steps.shape[0])

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def rows(self, include_theta: bool = False):
        cols = [c for c in DIAG_COLUMNS if c in self.diagnostics]
        for j, k in enumerate(self.steps):
            row = [int(k)] + [self.diagnostics[c][j] for c in cols]
            if include_theta:
                row.extend(self.iterates[j])
            yield row

    def header(self, include_theta: bool = False) -> list[str]:
        cols = ["step"] + [c for c in DIAG_COLUMNS if c in self.diagnostics]
        if include_theta:
            cols.extend(f"theta_{i}" for i in range(self.iterates.shape[1]))
        return cols

    def to_csv(self, path, include_theta: bool = False):
        return write_csv(path, self.header(include_theta), self.rows(include_theta))


def run(bundle, theta0, hp: HyperParams, record_stride: int = 1, *, keep_noise: bool = False,
        replay: Optional[Sequence[NoiseRecord]] = None, diagnostics: bool = True,
        sigma_fn: Optional[Callable] = None, replica: int = 0,
        reg_cfg: Optional[RegConfig] = None) -> Trajectory:
    """Iterate the optimizer selected by ``hp.noise_kind`` for ``hp.T`` steps.

    Iterates (and diagnostics, if requested) are stored every
    ``record_stride`` steps and at the final step. ``replay`` feeds recorded
    noise instead of drawing from the ``(hp.seed, replica)`` stream, which is
    the :class:`NoiseStream` returned by :func:`noise_stream`.
    """
    if record_stride < 1:
        raise ValueError("record_stride must be >= 1")
    if hp.noise_kind != "gaussian-cov":
        _check_batch(bundle, hp)
    if replay is not None and len(replay) < hp.T:
        raise ValueError("replay log is shorter than T")
    theta = np.array(theta0, dtype=float)
    step = _stepper(bundle, hp, sigma_fn)
    stream = None if replay is not None else noise_stream(bundle, hp, replica)
    cfg = reg_cfg if reg_cfg is not None else hp.reg_config(bundle.alpha)
    log = [] if keep_noise else None

    steps, its, diag = [0], [theta.copy()], []
    if diagnostics:
        diag.append(diagnostics_at(bundle, theta, cfg))
    prev = theta
    for k in range(1, hp.T + 1):
        rs = replay[k - 1] if replay is not None else stream.next()
        new, rec = step_heavy_ball(step, theta, prev, hp, rs)
        prev, theta = theta, new
        if log is not None:
            log.append(rec)
        if k % record_stride == 0 or k == hp.T:
            steps.append(k)
            its.append(theta.copy())
            if diagnostics:
                diag.append(diagnostics_at(bundle, theta, cfg))
    dd = {}
    if diagnostics:
        arr = np.array(diag)
        dd = {c: arr[:, j] for j, c in enumerate(DIAG_COLUMNS)}
    return Trajectory(np.array(steps), np.array(its), dd, log, hp)


def phi_step(bundle, theta, cfg: RegConfig, theta_prev=None) -> np.ndarray:
    """One gradient step on ``L + lambda R`` (with momentum when ``theta_prev`` is given)."""
    _, g = reg_loss(bundle, theta, cfg)
    out = theta - cfg.eta * g
    if theta_prev is not None and cfg.beta != 0.0:
        out = out + cfg.beta * (theta - theta_prev)
    return out


def run_phi(bundle, theta0, cfg: RegConfig, k: int) -> np.ndarray:
    """``Phi_0 .. Phi_k`` as an array of shape ``(k+1, d)``; ``Phi_{-1} = Phi_0``."""
    theta = np.array(theta0, dtype=float)
    out = np.empty((k + 1, theta.size))
    out[0] = theta
    prev = theta
    for j in range(1, k + 1):
        new = phi_step(bundle, theta, cfg, prev)
        prev, theta = theta, new
        out[j] = theta
    return out
