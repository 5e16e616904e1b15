"""Per-sample model families with exact first and second derivatives.

A :class:`ModelHandle` wraps three vectorized evaluators taking ``(theta, idx)``
where ``idx`` is an integer array of sample indices (``None`` means all
samples): values of shape ``(m,)``, Jacobian rows of shape ``(m, d)`` and
per-sample Hessians of shape ``(m, d, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NotPSD, TooLarge
from .spectral import check_symmetric, eig_sym

__all__ = [
    "Smoothness",
    "ModelHandle",
    "Dataset",
    "make_quadratic",
    "make_quad_param_regression",
    "make_mlp",
    "make_cycling_model",
    "make_redundant_quad_param",
    "MLP_PARAM_BUDGET",
]

MLP_PARAM_BUDGET = 2000

Evaluator = Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class Smoothness:
    """Bounds on ``||grad f_i||`` (l_f), ``||hess f_i||`` (rho_f) and the third derivative (kappa_f).

    ``None`` marks a constant with no global bound ("unbounded").
    """

    l_f: Optional[float] = None
    rho_f: Optional[float] = None
    kappa_f: Optional[float] = None
    note: str = ""

    @property
    def analytic_rho(self) -> bool:
        return self.rho_f is not None


@dataclass(frozen=True)
class ModelHandle:
    name: str
    param_dim: int
    sample_count: int
    values_fn: Evaluator = field(repr=False)
    jacobian_fn: Evaluator = field(repr=False)
    hessians_fn: Evaluator = field(repr=False)
    smoothness: Smoothness = field(default_factory=Smoothness)
    reference: Optional[np.ndarray] = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def _theta(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        if t.shape != (self.param_dim,):
            raise ValueError(f"{self.name}: theta must have shape ({self.param_dim},), got {t.shape}")
        return t

    def values(self, theta, idx=None) -> np.ndarray:
        return self.values_fn(self._theta(theta), idx)

    def jacobian(self, theta, idx=None) -> np.ndarray:
        return self.jacobian_fn(self._theta(theta), idx)

    def hessians(self, theta, idx=None) -> np.ndarray:
        return self.hessians_fn(self._theta(theta), idx)

    def eval(self, i: int, theta) -> float:
        return float(self.values(theta, np.array([i]))[0])

    def grad(self, i: int, theta) -> np.ndarray:
        return self.jacobian(theta, np.array([i]))[0]

    def hess(self, i: int, theta) -> np.ndarray:
        return self.hessians(theta, np.array([i]))[0]

    def measured_smoothness(self, thetas: Sequence) -> Smoothness:
        """Empirical ``max ||grad f_i||`` and ``max ||hess f_i||`` over a probe set."""
        lf, rho = 0.0, 0.0
        for t in thetas:
            J = self.jacobian(t)
            lf = max(lf, float(np.max(np.linalg.norm(J, axis=1))))
            Hs = self.hessians(t)
            rho = max(rho, float(np.max(np.abs(np.linalg.eigvalsh(Hs)))))
        return Smoothness(lf, rho, None, note="measured proxy over probe set")


@dataclass(frozen=True)
class Dataset:
    targets: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])


def _rows(idx, n):
    return slice(None) if idx is None else np.asarray(idx, dtype=int)


# ---------------------------------------------------------------------------
# Quadratic
# ---------------------------------------------------------------------------

def make_quadratic(H, b=None) -> tuple[ModelHandle, Dataset]:
    """Linear per-sample model whose square loss is exactly ``0.5 theta^T H theta``.

    ``f_i(theta) = sqrt(n) (H^{1/2})_i . theta + b_i`` with ``n = d`` and
    ``y_i = b_i``; the ``sqrt(n)`` factor cancels the ``1/n`` of the mean loss.
    """
    H = check_symmetric(H, "H")
    d = H.shape[0]
    spec = eig_sym(H)
    if d and spec.eigenvalues[-1] < -1e-12:
        raise NotPSD(f"H has eigenvalue {spec.eigenvalues[-1]:.3e} < -1e-12")
    root = spec.apply(lambda x: np.sqrt(np.clip(x, 0.0, None)))
    A = np.sqrt(d) * root
    b = np.zeros(d) if b is None else np.asarray(b, dtype=float).reshape(d)

    def values(theta, idx):
        r = _rows(idx, d)
        return A[r] @ theta + b[r]

    def jac(theta, idx):
        return A[_rows(idx, d)].copy()

    def hess(theta, idx):
        m = d if idx is None else len(idx)
        return np.zeros((m, d, d))

    lf = float(np.max(np.linalg.norm(A, axis=1))) if d else 0.0
    model = ModelHandle("quadratic", d, d, values, jac, hess,
                        Smoothness(lf, 0.0, 0.0, "analytic"), reference=np.zeros(d),
                        params={"H": H.tolist()})
    return model, Dataset(b.copy())


# ---------------------------------------------------------------------------
# Quadratically parametrized linear regression
# ---------------------------------------------------------------------------

def make_quad_param_regression(design, sparse_truth) -> tuple[ModelHandle, Dataset]:
    """``f_i(theta) = sum_j theta_j^2 x_ij`` with targets ``y_i = sum_j w*_j x_ij``.

    Values are always computed over the full design and then indexed, so a
    point with ``theta**2 == w*`` bit-for-bit interpolates exactly.
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    n, d = X.shape
    w = np.asarray(sparse_truth, dtype=float)
    if w.shape != (d,):
        raise ValueError(f"sparse_truth must have shape ({d},), got {w.shape}")
    y = X @ w

    def values(theta, idx):
        f = X @ (theta * theta)
        return f if idx is None else f[np.asarray(idx, dtype=int)]

    def jac(theta, idx):
        return 2.0 * X[_rows(idx, n)] * theta[None, :]

    def hess(theta, idx):
        Xr = X[_rows(idx, n)]
        out = np.zeros((Xr.shape[0], d, d))
        ii = np.arange(d)
        out[:, ii, ii] = 2.0 * Xr
        return out

    rho = 2.0 * float(np.max(np.abs(X))) if X.size else 0.0
    ref = np.sqrt(w) if np.all(w >= 0) else None
    model = ModelHandle("quad_param", d, n, values, jac, hess,
                        Smoothness(None, rho, 0.0, "l_f unbounded; rho_f = 2 max|x_ij|"),
                        reference=ref, params={"n": n, "d": d})
    return model, Dataset(y)


def make_redundant_quad_param(n: int = 6, m: int = 4, kappa: float = 0.5, support: int = 2,
                              sharp_weight: float = 0.01, seed: int = 0
                              ) -> tuple[ModelHandle, Dataset, np.ndarray]:
    """Quad-param model with a rescaled copy of every feature, plus a sharp interpolating start.

    Features are ``[X0, kappa X0]`` for a standard-normal ``X0`` of shape
    ``(n, m)``. A target weight ``w0`` on the first ``support`` base features
    can be carried by either copy; putting fraction ``1 - sharp_weight`` on the
    base copy and the rest on the scaled copy (divided by ``kappa``) makes
    ``tr hess L`` large. The flat alternative moves weight to the scaled copy.
    Targets are set to ``f(theta0)`` so the start interpolates exactly.

    Returns ``(model, dataset, theta0)``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    X0 = rng.standard_normal((n, m))
    X = np.hstack([X0, kappa * X0])
    w_base = np.zeros(m)
    w_base[:support] = 1.0
    w0 = np.concatenate([(1.0 - sharp_weight) * w_base, sharp_weight * w_base / kappa])
    theta0 = np.sqrt(w0)
    model, _ = make_quad_param_regression(X, theta0 * theta0)
    model = _replace(model, name="redundant_quad_param", reference=theta0,
                     params={"n": n, "m": m, "kappa": kappa, "support": support,
                             "sharp_weight": sharp_weight, "seed": seed})
    y = model.values(theta0)
    return model, Dataset(y), theta0


def _replace(model: ModelHandle, **kw) -> ModelHandle:
    from dataclasses import replace
    return replace(model, **kw)


# ---------------------------------------------------------------------------
# Softplus MLP
# ---------------------------------------------------------------------------

def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class _MLP:
    """Scalar-output softplus network; parameters flattened layer by layer.

    Layout: for each hidden layer ``W_l`` (row-major, shape ``(h_l, h_{l-1})``)
    then ``b_l``; finally the output weights ``w`` (``h_K``) and bias ``b_o``.
    """

    def __init__(self, widths: Sequence[int], inputs: np.ndarray):
        self.widths = tuple(int(w) for w in widths)
        self.X = inputs
        self.slices = []
        off = 0
        for l in range(1, len(self.widths)):
            hi, lo = self.widths[l], self.widths[l - 1]
            sW = slice(off, off + hi * lo)
            off += hi * lo
            sb = slice(off, off + hi)
            off += hi
            self.slices.append((sW, sb, (hi, lo)))
        self.s_w = slice(off, off + self.widths[-1])
        off += self.widths[-1]
        self.s_bo = off
        off += 1
        self.P = off

    def unpack(self, theta):
        layers = [(theta[sW].reshape(shape), theta[sb]) for sW, sb, shape in self.slices]
        return layers, theta[self.s_w], theta[self.s_bo]

    def forward(self, theta, X):
        layers, w, bo = self.unpack(theta)
        hs, acts = [X], []
        h = X
        for W, b in layers:
            a = h @ W.T + b
            acts.append(a)
            h = _softplus(a)
            hs.append(h)
        return hs, acts, h @ w + bo

    def values(self, theta, idx):
        X = self.X if idx is None else self.X[np.asarray(idx, dtype=int)]
        return self.forward(theta, X)[2]

    def jacobian(self, theta, idx):
        X = self.X if idx is None else self.X[np.asarray(idx, dtype=int)]
        layers, w, _ = self.unpack(theta)
        hs, acts, _ = self.forward(theta, X)
        m = X.shape[0]
        J = np.zeros((m, self.P))
        J[:, self.s_w] = hs[-1]
        J[:, self.s_bo] = 1.0
        gh = np.broadcast_to(w, (m, w.shape[0]))
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            sW, sb, _ = self.slices[l]
            dl = _sigmoid(acts[l]) * gh
            J[:, sW] = (dl[:, :, None] * hs[l][:, None, :]).reshape(m, -1)
            J[:, sb] = dl
            gh = dl @ W
        return J

    def hessians(self, theta, idx):
        """Exact Hessians by pushing all ``P`` basis tangents through backprop at once."""
        X = self.X if idx is None else self.X[np.asarray(idx, dtype=int)]
        layers, w, _ = self.unpack(theta)
        hs, acts, _ = self.forward(theta, X)
        m, P = X.shape[0], self.P
        E = np.eye(P)
        dWs = [E[:, sW].reshape(P, *shape) for sW, _, shape in self.slices]
        dbs = [E[:, sb] for _, sb, _ in self.slices]
        dw = E[:, self.s_w]

        # forward tangents: dh[l] has shape (m, P, h_l)
        dh = [np.zeros((m, P, X.shape[1]))]
        das = []
        for l, (W, _) in enumerate(layers):
            da = (np.einsum("mc,prc->mpr", hs[l], dWs[l])
                  + np.einsum("mpc,rc->mpr", dh[l], W) + dbs[l][None])
            das.append(da)
            dh.append(_sigmoid(acts[l])[:, None, :] * da)

        Hs = np.zeros((m, P, P))
        Hs[:, :, self.s_w] = dh[-1]
        gh = np.broadcast_to(w, (m, w.shape[0]))
        dgh = np.broadcast_to(dw[None], (m, P, w.shape[0]))
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            sW, sb, _ = self.slices[l]
            s1 = _sigmoid(acts[l])
            s2 = s1 * (1.0 - s1)
            dl = s1 * gh
            ddl = s2[:, None, :] * das[l] * gh[:, None, :] + s1[:, None, :] * dgh
            dgW = ddl[:, :, :, None] * hs[l][:, None, None, :] + dl[:, None, :, None] * dh[l][:, :, None, :]
            Hs[:, :, sW] = dgW.reshape(m, P, -1)
            Hs[:, :, sb] = ddl
            dgh = np.einsum("mpr,rc->mpc", ddl, W) + np.einsum("mr,prc->mpc", dl, dWs[l])
            gh = dl @ W
        return 0.5 * (Hs + np.transpose(Hs, (0, 2, 1)))


def make_mlp(widths: Sequence[int], activation: str = "softplus", n_samples: int = 8,
             seed: int = 0, teacher_scale: float = 1.0) -> tuple[ModelHandle, Dataset]:
    """Fully connected scalar-output network on fixed standard-normal inputs.

    ``widths`` lists the input dimension followed by hidden widths. Targets
    come from a teacher network of the same shape with weights drawn from
    ``N(0, teacher_scale^2 / fan_in)``; inputs and teacher share the frozen
    ``seed``. The returned reference point is the teacher parameter vector,
    an exact interpolating minimizer.
    """
    if activation != "softplus":
        raise ValueError(f"unsupported activation {activation!r}")
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError("widths needs an input size and at least one hidden layer")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    X = rng.standard_normal((n_samples, widths[0]))
    net = _MLP(widths, X)
    if net.P > MLP_PARAM_BUDGET:
        raise TooLarge(f"MLP has {net.P} parameters, budget is {MLP_PARAM_BUDGET}")
    teacher = np.empty(net.P)
    for sW, sb, (hi, lo) in net.slices:
        teacher[sW] = rng.standard_normal(hi * lo) * teacher_scale / np.sqrt(lo)
        teacher[sb] = 0.1 * rng.standard_normal(hi)
    teacher[net.s_w] = rng.standard_normal(widths[-1]) * teacher_scale / np.sqrt(widths[-1])
    teacher[net.s_bo] = 0.0
    y = net.values(teacher, None)
    model = ModelHandle("mlp", net.P, n_samples, net.values, net.jacobian, net.hessians,
                        Smoothness(None, None, None, "unbounded; use measured_smoothness for a proxy"),
                        reference=teacher, params={"widths": list(widths), "n_samples": n_samples,
                                                   "seed": seed})
    return model, Dataset(y)


# ---------------------------------------------------------------------------
# Cycling counterexample
# ---------------------------------------------------------------------------

# f_i = (1 + s_i u_i) z_{k_i} + c_i for i = 1..12 with u in {x, y};
# f_13 = x^2 + y^2 - 1. Columns: coordinate of u (0 = x, 1 = y), sign s, k, c.
_CYCLE_TABLE = np.array([
    [1, -1, 0, -1.0],  # f1  = (1-y) z1 - 1
    [1, -1, 0, +1.0],  # f2  = (1-y) z1 + 1
    [1, +1, 1, -1.0],  # f3  = (1+y) z2 - 1
    [1, +1, 1, +1.0],  # f4  = (1+y) z2 + 1
    [0, -1, 2, -1.0],  # f5  = (1-x) z3 - 1
    [0, -1, 2, +1.0],  # f6  = (1-x) z3 + 1
    [0, +1, 3, -1.0],  # f7  = (1+x) z4 - 1
    [0, +1, 3, +1.0],  # f8  = (1+x) z4 + 1
    [0, -1, 0, 0.0],   # f9  = (1-x) z1
    [0, +1, 1, 0.0],   # f10 = (1+x) z2
    [1, +1, 2, 0.0],   # f11 = (1+y) z3
    [1, -1, 3, 0.0],   # f12 = (1-y) z4
])


def make_cycling_model(literal_f6: bool = False) -> tuple[ModelHandle, Dataset]:
    """Thirteen functions of ``theta = (x, y, z1, z2, z3, z4)``, all labels 0.

    Each pair (f1,f2), (f3,f4), (f5,f6), (f7,f8) shares one z, so the
    default has ``f6 = (1-x) z3 + 1``. ``literal_f6=True`` gives the variant
    ``f6 = (1-x) z4 + 1``, where ``z3`` gets no restoring force near
    ``x = -1`` and no cycle forms.
    """
    tab = _CYCLE_TABLE.copy()
    if literal_f6:
        tab[5, 2] = 3
    u_col = tab[:, 0].astype(int)
    sgn = tab[:, 1]
    zk = tab[:, 2].astype(int) + 2
    const = tab[:, 3]
    n, d = 13, 6

    tab_u, tab_k, tab_s = u_col.tolist(), zk.tolist(), sgn.tolist()
    tab_c = const.tolist()

    def values(theta, idx):
        if idx is not None and len(idx) == 1:
            i = int(idx[0])
            if i == 12:
                return np.array([theta[0] ** 2 + theta[1] ** 2 - 1.0])
            return np.array([(1.0 + tab_s[i] * theta[tab_u[i]]) * theta[tab_k[i]] + tab_c[i]])
        f = np.empty(n)
        f[:12] = (1.0 + sgn * theta[u_col]) * theta[zk] + const
        f[12] = theta[0] ** 2 + theta[1] ** 2 - 1.0
        return f if idx is None else f[np.asarray(idx, dtype=int)]

    rows12 = np.arange(12)

    def jac(theta, idx):
        if idx is None:
            J = np.zeros((n, d))
            J[rows12, u_col] = sgn * theta[zk]
            J[rows12, zk] = 1.0 + sgn * theta[u_col]
            J[12, 0] = 2.0 * theta[0]
            J[12, 1] = 2.0 * theta[1]
            return J
        idx = np.asarray(idx, dtype=int)
        if idx.shape[0] == 1:
            # scalar path: B = 1 dominates the cycling runs
            i = int(idx[0])
            J = np.zeros((1, d))
            if i == 12:
                J[0, 0] = 2.0 * theta[0]
                J[0, 1] = 2.0 * theta[1]
            else:
                u, k, sg = tab_u[i], tab_k[i], tab_s[i]
                J[0, u] = sg * theta[k]
                J[0, k] = 1.0 + sg * theta[u]
            return J
        J = np.zeros((idx.shape[0], d))
        last = idx == 12
        ii = np.where(last, 0, idx)
        r = np.arange(idx.shape[0])
        J[r, u_col[ii]] = sgn[ii] * theta[zk[ii]]
        J[r, zk[ii]] = 1.0 + sgn[ii] * theta[u_col[ii]]
        if np.any(last):
            J[last] = 0.0
            J[last, 0] = 2.0 * theta[0]
            J[last, 1] = 2.0 * theta[1]
        return J

    Hall = np.zeros((n, d, d))
    rows = np.arange(12)
    Hall[rows, u_col, zk] = sgn
    Hall[rows, zk, u_col] = sgn
    Hall[12, 0, 0] = Hall[12, 1, 1] = 2.0

    def hess(theta, idx):
        return Hall.copy() if idx is None else Hall[np.asarray(idx, dtype=int)]

    model = ModelHandle("cycling", d, n, values, jac, hess,
                        Smoothness(None, 2.0, 0.0, "l_f unbounded; rho_f = 2 from f13"),
                        reference=np.array([1.0, 0, 0, 0, 0, 0]),
                        params={"literal_f6": bool(literal_f6)})
    return model, Dataset(np.zeros(n))
