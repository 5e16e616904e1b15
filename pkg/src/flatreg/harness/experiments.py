"""Experiment drivers behind the CLI subcommands.

Every ``cmd_*`` takes an :class:`ExperimentConfig`, writes CSV tables, a
``summary.json`` and a ``manifest.json`` into the run directory, and
returns a :class:`RunArtifact`. Tables and summaries are pure functions of
the config; the manifest also records the wall time.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import __version__
from .. import objective as obj
from ..coupling import coupling_experiment
from ..dynamics import HyperParams, diagnostics_at, make_rng, run, run_phi
from ..errors import ConfigError
from ..io import write_csv, write_json
from ..regularizer import normalized_sharpness_from_eigs, reg_value_from_eigs
from .config import ExperimentConfig
from .models import build_model
from .suites import SUITES, Check, run_suites

__all__ = ["RunArtifact", "run_dir", "thread_count", "cmd_verify", "cmd_escape", "cmd_cycle",
           "cmd_couple", "cmd_limits", "cmd_constants", "COMMANDS", "RNG_NOTE"]

RNG_NOTE = "numpy Philox; replica r of seed s uses SeedSequence(s, spawn_key=(r,))"


@dataclass
class RunArtifact:
    out_dir: Path
    manifest: dict
    summary: dict
    tables: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def report(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'} {c.suite}/{c.name}: measured={c.measured:.6g} "
                 f"bound={c.bound:.6g}" + (f" ({c.detail})" if c.detail else "") for c in self.checks]
        nf = sum(not c.passed for c in self.checks)
        lines.append(f"{len(self.checks)} checks, {nf} failed")
        return "\n".join(lines)


def run_dir(cfg: ExperimentConfig, out: Optional[str] = None) -> Path:
    if out:
        return Path(out)
    return Path(cfg.out) if cfg.out else Path("runs") / cfg.kind


def thread_count() -> int:
    raw = os.environ.get("FLATREG_THREADS", "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FLATREG_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("FLATREG_THREADS must be >= 1")
    return n


def _pmap(fn: Callable, items: list) -> list:
    n = min(thread_count(), max(1, len(items)))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _build(cfg: ExperimentConfig):
    built = build_model(cfg.model)
    if cfg.hyper.B > built.bundle.n:
        raise ConfigError(f"[hyper] batch = {cfg.hyper.B} exceeds the model's {built.bundle.n} samples")
    return built


def _finish(cfg: ExperimentConfig, out_dir: Path, t0: float, tables: dict, summary: dict,
            checks: list) -> RunArtifact:
    summary = dict(summary)
    summary["checks"] = [{"suite": c.suite, "name": c.name, "measured": c.measured, "bound": c.bound,
                          "passed": bool(c.passed), "detail": c.detail} for c in checks]
    summary["passed"] = all(c.passed for c in checks)
    write_json(out_dir / "summary.json", summary)
    manifest = {
        "experiment": cfg.kind,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "version": __version__,
        "numpy_version": np.__version__,
        "rng": RNG_NOTE,
        "tables": sorted(tables),
        "wall_time_s": time.perf_counter() - t0,
    }
    write_json(out_dir / "manifest.json", manifest)
    return RunArtifact(out_dir, manifest, summary, {k: out_dir / k for k in tables}, list(checks))


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(cfg: ExperimentConfig, out: Optional[str] = None) -> RunArtifact:
    t0 = time.perf_counter()
    out_dir = run_dir(cfg, out)
    names = list(cfg.options["suites"])
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"[verify] unknown suite(s): {', '.join(unknown)}; known: {', '.join(SUITES)}")
    checks = run_suites(cfg, names)
    write_csv(out_dir / "verify.csv", ["suite", "name", "measured", "bound", "passed", "detail"],
              (c.row() for c in checks))
    summary = {"suites": names, "n_checks": len(checks), "n_failed": sum(not c.passed for c in checks)}
    return _finish(cfg, out_dir, t0, {"verify.csv": 1}, summary, checks)


# ---------------------------------------------------------------------------
# escape
# ---------------------------------------------------------------------------

_ESCAPE_COLS = ["step", "loss", "trH", "R", "gradnorm"]


def _escape_rows(traj):
    d = traj.diagnostics
    for j, k in enumerate(traj.steps):
        yield [int(k), d["loss"][j], d["trH"][j], d["R"][j], d["gradnorm"][j]]


def _diag_row(k, diag):
    loss, R, trH, gn, _ = diag
    return [int(k), loss, trH, R, gn]


def _tail(values, frac):
    w = max(1, int(math.ceil(frac * len(values))))
    return float(np.mean(values[-w:]))


def cmd_escape(cfg: ExperimentConfig, out: Optional[str] = None) -> RunArtifact:
    """Label-noise SGD versus plain SGD from a sharp interpolating minimizer.

    The trH reduction ratio compares the mean ``tr hess L`` over the last
    ``tail_fraction`` of recorded rows with its initial value; a single
    final snapshot is dominated by the fluctuation of the noisy iterate.
    """
    t0 = time.perf_counter()
    out_dir = run_dir(cfg, out)
    built = _build(cfg)
    b, theta0 = built.bundle, built.start
    interp = float(np.max(np.abs(b.model.values(theta0) - b.dataset.targets)))
    if interp > 1e-12:
        raise ConfigError(f"escape needs an interpolating start; max residual is {interp:.3e}")
    hp = cfg.hyper
    o = cfg.options
    stride = cfg.record_stride
    frac = float(o["tail_fraction"])

    # noiseless arm: every iterate kept so the movement bound covers all steps
    hp0 = HyperParams(**{**hp.to_dict(), "sigma": 0.0, "noise_kind": "none"})
    plain = run(b, theta0, hp0, 1, diagnostics=False)
    move = float(np.max(np.linalg.norm(plain.iterates - theta0, axis=1)))
    rc0 = hp0.reg_config(b.alpha)
    idx = [k for k in range(0, hp.T + 1) if k % stride == 0 or k == hp.T]
    tables = {}
    write_csv(out_dir / "noiseless.csv", _ESCAPE_COLS,
              (_diag_row(k, diagnostics_at(b, plain.iterates[k], rc0)) for k in idx))
    tables["noiseless.csv"] = 1

    etas = sorted(set([float(e) for e in o["eta_grid"]] + [hp.eta]))
    jobs = [(eta, r) for eta in etas for r in range(cfg.replicas)]

    def job(item):
        eta, r = item
        hpe = HyperParams(**{**hp.to_dict(), "eta": eta})
        return run(b, theta0, hpe, stride, replica=r)

    trajs = dict(zip(jobs, _pmap(job, jobs)))
    write_csv(out_dir / "label_noise.csv", _ESCAPE_COLS, _escape_rows(trajs[(hp.eta, 0)]))
    tables["label_noise.csv"] = 1

    sweep = []
    for eta, r in jobs:
        d = trajs[(eta, r)].diagnostics
        lam = HyperParams(**{**hp.to_dict(), "eta": eta}).lam
        tr0, trt = float(d["trH"][0]), _tail(d["trH"], frac)
        sweep.append([eta, r, lam, tr0, trt, trt / tr0, _tail(d["loss"], frac)])
    write_csv(out_dir / "eta_sweep.csv", ["eta", "replica", "lambda", "trH0", "trH_tail", "ratio", "loss_tail"],
              sweep)
    tables["eta_sweep.csv"] = 1

    def mean_for(eta, col):
        return float(np.mean([row[col] for row in sweep if row[0] == eta]))

    ratio = mean_for(hp.eta, 5)
    loss_tail = mean_for(hp.eta, 6)
    grid = sorted(float(e) for e in o["eta_grid"])
    grid_ratios = [mean_for(e, 5) for e in grid]
    monotone = all(a > b_ for a, b_ in zip(grid_ratios, grid_ratios[1:]))
    checks = [
        Check("escape", "trH_reduction", ratio, 1.0 - float(o["min_reduction"]),
              ratio <= 1.0 - float(o["min_reduction"]), "tail-window trH / initial trH"),
        Check("escape", "loss_scale", loss_tail, float(o["loss_factor"]) * hp.lam,
              loss_tail <= float(o["loss_factor"]) * hp.lam, "tail-window loss vs loss_factor * lambda"),
        Check("escape", "noiseless_movement", move, 1e-12, move <= 1e-12, "max_k ||theta_k - theta_0||"),
        Check("escape", "monotone_in_eta", float(monotone), 1.0, monotone,
              "ratios " + ", ".join(f"{e:g}:{r:.4f}" for e, r in zip(grid, grid_ratios))),
    ]
    summary = {"eta": hp.eta, "lambda": hp.lam, "trH0": mean_for(hp.eta, 3), "trH_tail": mean_for(hp.eta, 4),
               "trH_ratio": ratio, "loss_tail": loss_tail, "noiseless_max_move": move,
               "eta_grid": grid, "eta_grid_ratios": grid_ratios, "monotone": monotone,
               "tail_fraction": frac, "replicas": cfg.replicas}
    return _finish(cfg, out_dir, t0, tables, summary, checks)


# ---------------------------------------------------------------------------
# cycle
# ---------------------------------------------------------------------------

def cmd_cycle(cfg: ExperimentConfig, out: Optional[str] = None) -> RunArtifact:
    t0 = time.perf_counter()
    out_dir = run_dir(cfg, out)
    built = _build(cfg)
    if cfg.model.family != "cycling":
        raise ConfigError("cycle needs [model] family = cycling")
    traj = run(built.bundle, built.start, cfg.hyper, 1, diagnostics=False)
    th = traj.iterates
    x, y = th[:, 0], th[:, 1]
    angle = np.unwrap(np.arctan2(y, x))
    angle = angle - angle[0]
    dev = np.abs(x * x + y * y - 1.0)
    w = max(1, int(cfg.options["ma_window"]))
    z2 = th[:, 2:6] ** 2
    csum = np.vstack([np.zeros((1, 4)), np.cumsum(z2, axis=0)])
    k = np.arange(th.shape[0])
    lo = np.maximum(0, k - w + 1)
    ma = (csum[k + 1] - csum[lo]) / (k + 1 - lo)[:, None]
    rows_idx = [j for j in range(th.shape[0]) if j % cfg.record_stride == 0 or j == th.shape[0] - 1]
    write_csv(out_dir / "cycle.csv", ["step", "x", "y", "z1sq_ma", "z2sq_ma", "z3sq_ma", "z4sq_ma", "angle"],
              ([j, x[j], y[j], *ma[j], angle[j]] for j in rows_idx))
    swept = float(angle[-1])
    maxdev = float(dev.max())
    tol = float(cfg.options["max_deviation"])
    checks = [
        Check("cycle", "angle_swept", swept, 2 * math.pi, swept >= 2 * math.pi, "signed, counterclockwise > 0"),
        Check("cycle", "max_circle_deviation", maxdev, tol, maxdev <= tol, "max_k |x^2 + y^2 - 1|"),
    ]
    summary = {"angle_swept": swept, "turns": swept / (2 * math.pi), "max_circle_deviation": maxdev,
               "final": th[-1].tolist(), "steps": cfg.hyper.T, "eta": cfg.hyper.eta, "batch": cfg.hyper.B}
    return _finish(cfg, out_dir, t0, {"cycle.csv": 1}, summary, checks)


# ---------------------------------------------------------------------------
# couple
# ---------------------------------------------------------------------------

def cmd_couple(cfg: ExperimentConfig, out: Optional[str] = None) -> RunArtifact:
    """Coupling residual ``||theta_k - xi_k - Phi_k||`` over a lambda grid.

    ``sigma`` is set per grid point to ``sqrt(lambda B / eta)``; seeds are the
    replicas ``0..seeds-1`` of the configured seed, and all seeds at one
    lambda share the deterministic ``Phi`` path.
    """
    t0 = time.perf_counter()
    out_dir = run_dir(cfg, out)
    built = _build(cfg)
    b, ref = built.bundle, built.reference
    hp, o = cfg.hyper, cfg.options
    horizon, seeds = int(o["horizon"]), int(o["seeds"])
    lams = [float(v) for v in o["lambda_grid"]]
    if any(v < 0 for v in lams):
        raise ConfigError("[couple] lambda_grid entries must be >= 0")
    delta0 = np.zeros(b.d)
    tables, agg, med_res, med_phi = {}, [], [], []
    for i, lam in enumerate(lams):
        sigma = math.sqrt(lam * hp.B * (1.0 - hp.beta) / hp.eta)
        hpl = HyperParams(**{**hp.to_dict(), "sigma": sigma, "T": horizon})
        phi = run_phi(b, ref + delta0, hpl.reg_config(b.alpha), horizon)
        reps = _pmap(lambda s: coupling_experiment(b, ref, delta0, hpl, horizon, replica=s, phi=phi),
                     list(range(seeds)))
        name = f"residuals_lambda{i}.csv"

        def rows():
            for s, rep in enumerate(reps):
                for j in range(rep.steps.size):
                    if rep.steps[j] % cfg.record_stride == 0 or j == rep.steps.size - 1:
                        yield [s, int(rep.steps[j]), rep.residual[j], rep.xi_norm[j], rep.phi_dist[j]]

        write_csv(out_dir / name, ["seed", "step", "residual", "xi_norm", "phi_dist"], rows())
        tables[name] = 1
        for s, rep in enumerate(reps):
            agg.append([lam, s, rep.max_residual, rep.max_phi_dist,
                        float(rep.xi_norm.max()) if rep.xi_norm.size else 0.0])
        med_res.append(float(np.median([r.max_residual for r in reps])))
        med_phi.append(float(np.median([r.max_phi_dist for r in reps])))
    write_csv(out_dir / "aggregate.csv", ["lambda", "seed", "max_residual", "max_phi_dist", "max_xi_norm"], agg)
    tables["aggregate.csv"] = 1

    pos = [j for j, v in enumerate(lams) if v > 0]
    checks = []
    slope = gain = None
    if len(pos) >= 2:
        slope = float(np.polyfit(np.log([lams[j] for j in pos]), np.log([med_res[j] for j in pos]), 1)[0])
        gain = float(min(med_phi[j] / med_res[j] for j in pos))
        checks.append(Check("couple", "loglog_slope", slope, float(o["slope_high"]),
                            float(o["slope_low"]) <= slope <= float(o["slope_high"]),
                            f"required in [{o['slope_low']}, {o['slope_high']}]"))
        checks.append(Check("couple", "xi_gain", gain, float(o["min_xi_gain"]), gain >= float(o["min_xi_gain"]),
                            "min over lambda of median ||theta-Phi|| / median ||theta-xi-Phi||"))
    for j, v in enumerate(lams):
        if v == 0:
            checks.append(Check("couple", f"zero_noise_residual_lambda{j}", med_res[j], 0.0, med_res[j] == 0.0))
    summary = {"lambda_grid": lams, "median_max_residual": med_res, "median_max_phi_dist": med_phi,
               "fitted_exponent": slope, "xi_gain": gain, "seeds": seeds, "horizon": horizon,
               "eta": hp.eta, "batch": hp.B}
    return _finish(cfg, out_dir, t0, tables, summary, checks)


# ---------------------------------------------------------------------------
# limits
# ---------------------------------------------------------------------------

def cmd_limits(cfg: ExperimentConfig, out: Optional[str] = None) -> RunArtifact:
    """Per-eigenvalue regularizer curves and the normalized-sharpness limit."""
    t0 = time.perf_counter()
    out_dir = run_dir(cfg, out)
    o = cfg.options
    etas = sorted(float(e) for e in o["eta_grid"])
    pts = int(o["eig_points"])
    grid = np.linspace(0.0, float(o["eig_max"]) / max(etas), pts)
    rows, max_gap, below = [], [], 0
    for eta in etas:
        gaps = []
        for e in grid:
            R = reg_value_from_eigs([e], eta, cfg.hyper.beta)
            q = e / 4.0
            rows.append([eta, e, R, q, R - q])
            gaps.append(R - q)
            below += (R - q) < -1e-15 * max(1.0, q)
        max_gap.append(float(np.max(np.abs(gaps))))
    write_csv(out_dir / "limits_eigs.csv", ["eta", "eig", "R", "quarter", "gap"], rows)

    spec = np.asarray(o["spectrum"], dtype=float)
    nus = sorted((float(v) for v in o["nu_grid"]), reverse=True)
    l1 = float(np.max(spec))
    srows, errs = [], []
    for nu in nus:
        s = normalized_sharpness_from_eigs(spec, nu)
        err = abs(s.value - l1) / l1
        errs.append(err)
        srows.append([nu, s.value, s.lambda1, err, s.eta, bool(s.degenerate)])
    write_csv(out_dir / "limits_nu.csv", ["nu", "value", "lambda1", "rel_err", "eta", "degenerate"], srows)

    checks = [Check("limits", "R_at_least_quarter_eig", float(below), 0.0, below == 0,
                    "count of grid points with R < eig/4")]
    if len(etas) >= 2 and max_gap[0] > 0:
        sl = math.log(max_gap[1] / max_gap[0]) / math.log(etas[1] / etas[0])
        checks.append(Check("limits", "small_eta_gap_order", sl, 1.1, 0.9 <= sl <= 1.1,
                            "log-log slope of max gap between the two smallest eta, required in [0.9, 1.1]"))
    mono = all(b_ <= a for a, b_ in zip(errs, errs[1:]))
    checks.append(Check("limits", "sharpness_monotone_in_nu", float(mono), 1.0, mono))
    tol = float(o["sharpness_tol"])
    checks.append(Check("limits", "sharpness_rel_err_at_smallest_nu", errs[-1], tol, errs[-1] <= tol,
                        f"nu = {nus[-1]:g}"))
    summary = {"eta_grid": etas, "max_gap": max_gap, "spectrum": spec.tolist(), "nu_grid": nus,
               "sharpness_rel_err": errs}
    return _finish(cfg, out_dir, t0, {"limits_eigs.csv": 1, "limits_nu.csv": 1}, summary, checks)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

def flip_noise_moment(loss_kind: str, p: float, rng: np.random.Generator, draws: int) -> tuple[float, float]:
    """Mean and standard error of the squared flip noise at ``f = c``.

    A sample's ``d/df l(s y f)`` with ``s = -1`` w.p. ``p`` has mean
    ``lbar'(c) = 0`` at the minimizer, so its second moment is the noise
    strength.
    """
    c = obj.loss_constants(loss_kind, p).c
    s = np.where(rng.random(draws) < p, -1.0, 1.0)
    g = s * obj.margin_loss(loss_kind, s * c, 1)
    g2 = g * g
    return float(g2.mean()), float(g2.std(ddof=1) / math.sqrt(draws))


def cmd_constants(cfg: ExperimentConfig, out: Optional[str] = None) -> RunArtifact:
    t0 = time.perf_counter()
    out_dir = run_dir(cfg, out)
    o = cfg.options
    tol = float(o["tolerance"])
    draws = int(o["noise_draws"])
    rows, checks = [], []
    rng = make_rng(cfg.seed, 0)
    for kind in o["losses"]:
        if kind not in obj.LOSS_KINDS:
            raise ConfigError(f"[constants] unknown loss {kind!r}")
        for p in o["p_grid"]:
            a, n = obj.loss_constants(kind, p), obj.numeric_minimizer(kind, p)
            qa = obj.verify_quadratic_approx(kind, p, eps_q=float(o["eps_q"]))
            m2, se = flip_noise_moment(kind, p, rng, draws)
            rows.append([kind, p, a.c, n.c, a.sigma2, n.sigma2, a.alpha, n.alpha, qa.nu, m2, se])
            err = max(abs(a.c - n.c), abs(a.sigma2 - n.sigma2), abs(a.alpha - n.alpha))
            checks.append(Check("constants", f"{kind}_p{p:g}_closed_vs_numeric", err, tol, err <= tol))
            allowed = max(3.0 * se, 1e-12 * max(1.0, a.sigma2))
            checks.append(Check("constants", f"{kind}_p{p:g}_noise_moment", abs(m2 - a.sigma2), allowed,
                                abs(m2 - a.sigma2) <= allowed, f"{draws} draws, 3 SE"))
            checks.append(Check("constants", f"{kind}_p{p:g}_quadratic_approx", qa.nu, math.inf, qa.feasible))
    write_csv(out_dir / "constants.csv",
              ["loss_kind", "p", "c_closed", "c_numeric", "sigma2", "sigma2_numeric", "alpha", "alpha_numeric",
               "nu_measured", "noise_second_moment", "noise_se"], rows)
    summary = {"rows": len(rows), "losses": list(o["losses"]), "p_grid": list(o["p_grid"])}
    return _finish(cfg, out_dir, t0, {"constants.csv": 1}, summary, checks)


COMMANDS = {"verify": cmd_verify, "escape": cmd_escape, "cycle": cmd_cycle, "couple": cmd_couple,
            "limits": cmd_limits, "constants": cmd_constants}
