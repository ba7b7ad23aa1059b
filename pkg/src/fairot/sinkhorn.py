"""Entropic transport solvers: vanilla scaling iterations and the
fairness-constrained variant with blockwise group scalings.

Both solvers exist in a multiplicative and a log-domain form.  The log
form is selected automatically for small regularization (epsilon < 1)
or whenever the multiplicative kernel over/underflows, in which case the
solve is restarted in log domain with a warning.

The fair solver alternates three exact coordinate updates: row scalings
(u), column scalings (v), and one scalar per group pair (ell) chosen so
the plan's group coupling hits the target exactly.  The returned plan
factorizes as u_i * K_ij * ell_{s_i w_j} * v_j with K = exp(-C/eps - 1).
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .domain import (
    TAU_MARG,
    TransportPlan,
    _as_values,
    entropy_term,
    group_coupling,
    transport_cost,
)
from .fairness import TAU_F, InfeasibleTargetError, _target_matrix, fairness_loss

# Entries below this are treated as exact zeros so that block
# elimination is decisive and ell stays well defined.
ZERO_TARGET = 1e-15

# log-scale clamp at the double-precision underflow boundary, used for
# zero-target blocks in the log-domain solver
LOG_CLAMP = -745.0


@dataclass(frozen=True)
class DualPotentials:
    """Dual variables (f, g) plus fairness multipliers h.

    h has one entry per group pair and is zero for vanilla transport
    (represented as a 1x1 zero matrix when no groups are involved).
    The plan they induce is exp((f_i + g_j + h_{s_i w_j} - C_ij)/eps - 1).
    """

    f: np.ndarray
    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        for name in ("f", "g", "h"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"dual potential {name} contains non-finite entries")
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.

    ``log_domain=None`` selects the log-domain path automatically when
    epsilon < 1.  ``warm_start`` holds dual potentials from a previous
    solve of a nearby problem.
    """

    epsilon: float = 1.0
    max_iter: int = 1000
    tol: float = 1e-6
    log_domain: bool | None = None
    warm_start: DualPotentials | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")

    @property
    def use_log(self) -> bool:
        return self.epsilon < 1.0 if self.log_domain is None else self.log_domain


@dataclass(frozen=True)
class SolverReport:
    """Per-run record shared by all solvers in the toolkit."""

    converged: bool
    iterations: int
    final_residual: float
    objective: float
    transport_cost: float
    fairness_loss: float | None
    wall_time_seconds: float

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "objective": self.objective,
            "transport_cost": self.transport_cost,
            "fairness_loss": self.fairness_loss,
            "wall_time_seconds": self.wall_time_seconds,
        }


class _Overflow(Exception):
    """Internal signal: multiplicative scaling left the finite range."""


# exp(-C/eps - 1) stays finite and rows/columns keep representable mass
# only while the scaled cost range is below the double exp() boundary
_EXP_RANGE = 700.0


def _needs_log(c: np.ndarray, eps: float) -> bool:
    lo = float(c.min())
    hi = float(c.max())
    return (-lo) / eps > _EXP_RANGE or (hi - lo) / eps > _EXP_RANGE


def _marginal_residual(plan: np.ndarray) -> float:
    n, m = plan.shape
    row = np.abs(plan.sum(axis=1) - 1.0 / n).max()
    col = np.abs(plan.sum(axis=0) - 1.0 / m).max()
    return float(max(row, col))


def _report(plan, eps, cost, fl, converged, iterations, residual, t0) -> SolverReport:
    tc = transport_cost(plan, cost)
    return SolverReport(
        converged=converged,
        iterations=iterations,
        final_residual=residual,
        objective=tc + eps * entropy_term(plan),
        transport_cost=tc,
        fairness_loss=fl,
        wall_time_seconds=time.perf_counter() - t0,
    )


def _wrap_plan(values: np.ndarray, residual: float) -> TransportPlan:
    # the plan is only as feasible as the solver's achieved residual
    return TransportPlan(values, tol=max(TAU_MARG, residual * (1.0 + 1e-9)))


# ---------------------------------------------------------------------------
# vanilla solver
# ---------------------------------------------------------------------------


def sinkhorn(cost, cfg: SinkhornConfig = SinkhornConfig()) -> tuple[TransportPlan, DualPotentials, SolverReport]:
    """Solve uniform-marginal entropic transport by scaling iterations.

    Returns the plan, the dual potentials that generate it, and a
    report.  Non-convergence within ``cfg.max_iter`` is reported, not
    raised; the best iterate is still returned.
    """
    c = _as_values(cost)
    t0 = time.perf_counter()
    use_log = cfg.use_log or (cfg.log_domain is None and _needs_log(c, cfg.epsilon))
    if use_log:
        plan, pots, converged, iters, res = _sinkhorn_log(c, cfg)
    else:
        try:
            plan, pots, converged, iters, res = _sinkhorn_mult(c, cfg)
        except _Overflow:
            warnings.warn("numerical overflow in multiplicative scaling; retrying in log domain")
            plan, pots, converged, iters, res = _sinkhorn_log(c, cfg)
    report = _report(plan, cfg.epsilon, c, None, converged, iters, res, t0)
    return _wrap_plan(plan, res), pots, report


def _init_scalings(cfg: SinkhornConfig, n: int, m: int):
    if cfg.warm_start is not None:
        ws = cfg.warm_start
        if ws.f.shape != (n,) or ws.g.shape != (m,):
            raise ValueError(f"warm start shapes {ws.f.shape}/{ws.g.shape} do not match ({n},)/({m},)")
        return ws.f / cfg.epsilon, ws.g / cfg.epsilon
    return np.zeros(n), np.zeros(m)


def _sinkhorn_mult(c, cfg, check_every: int = 10):
    n, m = c.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        kern = np.exp(-c / cfg.epsilon - 1.0)
        lf0, lg0 = _init_scalings(cfg, n, m)
        u = np.exp(lf0)
        v = np.exp(lg0)
        if not (np.all(np.isfinite(kern)) and np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise _Overflow
        converged = False
        res = np.inf
        it = 0
        for it in range(1, cfg.max_iter + 1):
            kv = kern @ v
            if np.any(kv == 0):
                raise _Overflow
            u = a / kv
            ktu = kern.T @ u
            if np.any(ktu == 0):
                raise _Overflow
            v = b / ktu
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise _Overflow
            if it % check_every == 0 or it == cfg.max_iter:
                plan = u[:, None] * kern * v[None, :]
                res = _marginal_residual(plan)
                if res <= cfg.tol:
                    converged = True
                    break
        plan = u[:, None] * kern * v[None, :]
    res = _marginal_residual(plan)
    eps = cfg.epsilon
    pots = DualPotentials(eps * np.log(u), eps * np.log(v), np.zeros((1, 1)))
    return plan, pots, converged, it, res


def _sinkhorn_log(c, cfg, check_every: int = 10):
    n, m = c.shape
    log_a = -np.log(n)
    log_b = -np.log(m)
    lk = -c / cfg.epsilon - 1.0
    lu, lv = _init_scalings(cfg, n, m)
    converged = False
    res = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        lu = log_a - logsumexp(lk + lv[None, :], axis=1)
        lv = log_b - logsumexp(lk + lu[:, None], axis=0)
        if it % check_every == 0 or it == cfg.max_iter:
            plan = np.exp(lu[:, None] + lk + lv[None, :])
            res = _marginal_residual(plan)
            if res <= cfg.tol:
                converged = True
                break
    plan = np.exp(lu[:, None] + lk + lv[None, :])
    res = _marginal_residual(plan)
    eps = cfg.epsilon
    pots = DualPotentials(eps * lu, eps * lv, np.zeros((1, 1)))
    return plan, pots, converged, it, res


# ---------------------------------------------------------------------------
# fair solver
# ---------------------------------------------------------------------------


def _check_fair_inputs(c, fmat, src, dst):
    n, m = c.shape
    if src.size != n or dst.size != m:
        raise ValueError(f"label lengths ({src.size}, {dst.size}) do not match cost shape {c.shape}")
    ks, kw = fmat.shape
    if src.min() < 0 or src.max() >= ks or dst.min() < 0 or dst.max() >= kw:
        raise ValueError("labels outside the target's group range")
    p = np.bincount(src, minlength=ks) / n
    q = np.bincount(dst, minlength=kw) / m
    row_dev = np.abs(fmat.sum(axis=1) - p).max()
    col_dev = np.abs(fmat.sum(axis=0) - q).max()
    if max(row_dev, col_dev) > TAU_F:
        raise InfeasibleTargetError(
            f"target is not a coupling of the empirical group marginals "
            f"(row dev {row_dev:.3e}, col dev {col_dev:.3e}); validate or repair it first"
        )
    counts_s = np.bincount(src, minlength=ks)
    counts_w = np.bincount(dst, minlength=kw)
    for s in range(ks):
        for w in range(kw):
            if fmat[s, w] > 0 and (counts_s[s] == 0 or counts_w[w] == 0):
                raise InfeasibleTargetError(
                    f"group pair ({s + 1},{w + 1}) carries target mass {fmat[s, w]:.6g} "
                    "but has no sample pairs"
                )


def fair_sinkhorn(cost, target, src_labels, dst_labels,
                  cfg: SinkhornConfig = SinkhornConfig()) -> tuple[TransportPlan, DualPotentials, SolverReport]:
    """Entropic transport with the group coupling pinned to a target.

    Each sweep updates the row scalings, the column scalings, and then
    the per-group-pair scalings ell = F / Phi(u, v), where Phi is the
    group-blocked mass of diag(u) K diag(v).  Convergence requires both
    the marginal residual and the worst group-coupling deviation to fall
    below ``cfg.tol``.

    Target entries below 1e-15 are treated as exact zeros: those blocks
    are eliminated outright rather than scaled down.
    """
    c = _as_values(cost)
    fmat = _target_matrix(target).copy()
    src = np.asarray(src_labels, dtype=np.int64).ravel() - 1
    dst = np.asarray(dst_labels, dtype=np.int64).ravel() - 1
    _check_fair_inputs(c, fmat, src, dst)
    fmat[fmat < ZERO_TARGET] = 0.0
    t0 = time.perf_counter()
    use_log = cfg.use_log or (cfg.log_domain is None and _needs_log(c, cfg.epsilon))
    if use_log:
        out = _fair_log(c, fmat, src, dst, cfg)
    else:
        try:
            out = _fair_mult(c, fmat, src, dst, cfg)
        except _Overflow:
            warnings.warn("numerical overflow in multiplicative scaling; retrying in log domain")
            out = _fair_log(c, fmat, src, dst, cfg)
    plan, pots, converged, iters, res = out
    fl = fairness_loss(plan, fmat, src + 1, dst + 1)
    report = _report(plan, cfg.epsilon, c, fl, converged, iters, res, t0)
    return _wrap_plan(plan, _marginal_residual(plan)), pots, report


def _fair_residual(plan, fmat, src, dst) -> float:
    gc = group_coupling(plan, src + 1, dst + 1, fmat.shape[0], fmat.shape[1])
    return max(_marginal_residual(plan), float(np.abs(gc - fmat).max()))


def _init_fair(cfg: SinkhornConfig, n, m, ks, kw):
    if cfg.warm_start is not None:
        ws = cfg.warm_start
        if ws.h.shape != (ks, kw):
            raise ValueError(f"warm start h shape {ws.h.shape} does not match groups ({ks}, {kw})")
        return ws.f / cfg.epsilon, ws.g / cfg.epsilon, ws.h / cfg.epsilon
    return np.zeros(n), np.zeros(m), np.zeros((ks, kw))


def _fair_mult(c, fmat, src, dst, cfg):
    n, m = c.shape
    ks, kw = fmat.shape
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        kern = np.exp(-c / cfg.epsilon - 1.0)
        lu0, lv0, lell0 = _init_fair(cfg, n, m, ks, kw)
        u = np.exp(lu0)
        v = np.exp(lv0)
        ell = np.exp(lell0)
        if not (np.all(np.isfinite(kern)) and np.all(np.isfinite(u))
                and np.all(np.isfinite(v)) and np.all(np.isfinite(ell))):
            raise _Overflow
    zero = fmat == 0.0
    ell[zero] = 0.0
    src_onehot = np.zeros((n, ks))
    src_onehot[np.arange(n), src] = 1.0
    dst_onehot = np.zeros((m, kw))
    dst_onehot[np.arange(m), dst] = 1.0
    kt = kern * ell[src][:, dst]
    converged = False
    res = np.inf
    it = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(1, cfg.max_iter + 1):
            kv = kt @ v
            if np.any(kv == 0):
                raise _Overflow
            u = a / kv
            ktu = kt.T @ u
            if np.any(ktu == 0):
                raise _Overflow
            v = b / ktu
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise _Overflow
            # blockwise mass of diag(u) K diag(v); the update ell = F / Phi
            # makes the group coupling exact for the current (u, v)
            phi = src_onehot.T @ (u[:, None] * kern * v[None, :]) @ dst_onehot
            ell = np.divide(fmat, phi, out=np.zeros_like(fmat), where=~zero)
            if not np.all(np.isfinite(ell)):
                raise _Overflow
            kt = kern * ell[src][:, dst]
            plan = u[:, None] * kt * v[None, :]
            res = _fair_residual(plan, fmat, src, dst)
            if res <= cfg.tol:
                converged = True
                break
        plan = u[:, None] * kt * v[None, :]
    eps = cfg.epsilon
    with np.errstate(divide="ignore"):
        lh = np.log(ell)
    pots = DualPotentials(eps * np.log(u), eps * np.log(v), eps * np.maximum(lh, LOG_CLAMP))
    return plan, pots, converged, it, res


def _fair_log(c, fmat, src, dst, cfg):
    n, m = c.shape
    ks, kw = fmat.shape
    log_a = -np.log(n)
    log_b = -np.log(m)
    lk = -c / cfg.epsilon - 1.0
    lu, lv, lell = _init_fair(cfg, n, m, ks, kw)
    zero = fmat == 0.0
    lell = np.where(zero, LOG_CLAMP, lell)
    with np.errstate(divide="ignore"):
        lf = np.where(zero, -np.inf, np.log(np.where(zero, 1.0, fmat)))
    blocks = [
        [(np.flatnonzero(src == s), np.flatnonzero(dst == w)) for w in range(kw)]
        for s in range(ks)
    ]
    converged = False
    res = np.inf
    it = 0
    for it in range(1, cfg.max_iter + 1):
        lkt = lk + lell[src][:, dst]
        lu = log_a - logsumexp(lkt + lv[None, :], axis=1)
        lv = log_b - logsumexp(lkt + lu[:, None], axis=0)
        lphi = np.empty((ks, kw))
        for s in range(ks):
            for w in range(kw):
                rows, cols = blocks[s][w]
                if rows.size == 0 or cols.size == 0:
                    lphi[s, w] = -np.inf
                else:
                    sub = lk[np.ix_(rows, cols)]
                    lphi[s, w] = logsumexp(sub + lu[rows][:, None] + lv[cols][None, :])
        lell = np.where(zero, LOG_CLAMP, np.maximum(lf - lphi, LOG_CLAMP))
        plan = np.exp(lu[:, None] + lk + lell[src][:, dst] + lv[None, :])
        res = _fair_residual(plan, fmat, src, dst)
        if res <= cfg.tol:
            converged = True
            break
    plan = np.exp(lu[:, None] + lk + lell[src][:, dst] + lv[None, :])
    eps = cfg.epsilon
    pots = DualPotentials(eps * lu, eps * lv, eps * lell)
    return plan, pots, converged, it, res


# ---------------------------------------------------------------------------
# deterministic matching
# ---------------------------------------------------------------------------


def sample_matching(plan: TransportPlan, seed: int) -> list[tuple[int, int]]:
    """Draw one column per row from the row-normalized plan.

    Rows are processed in order; for row i a column j is sampled with
    probability plan[i, j] / row_mass(i).  Indices in the result are
    0-based.  Deterministic for a fixed seed.
    """
    vals = _as_values(plan)
    rows = vals.sum(axis=1)
    if np.any(rows <= 0):
        bad = int(np.argmin(rows))
        raise ValueError(f"row {bad} has no mass; cannot sample a matching")
    rng = np.random.default_rng(seed)
    m = vals.shape[1]
    out = []
    for i in range(vals.shape[0]):
        out.append((i, int(rng.choice(m, p=vals[i] / rows[i]))))
    return out


# ---------------------------------------------------------------------------
# plan persistence
# ---------------------------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    if path.suffix == ".csv":
        return path.with_suffix(".json")
    return path.with_name(path.name + ".json")


def save_plan(path, plan, report: SolverReport) -> tuple[Path, Path]:
    """Write a plan matrix as CSV next to a JSON sidecar of solver stats.

    The CSV holds the raw n x m matrix, one source point per line, with
    %.17g entries so the values round-trip exactly.  The sidecar shares
    the stem (plan.csv -> plan.json) and carries the SolverReport
    fields.  Returns the pair of written paths.
    """
    path = Path(path)
    vals = _as_values(plan)
    np.savetxt(path, vals, delimiter=",", fmt="%.17g")
    sidecar = _sidecar_path(path)
    sidecar.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return path, sidecar


def load_plan(path) -> tuple[TransportPlan, SolverReport]:
    """Read a plan written by save_plan back into solver types."""
    path = Path(path)
    vals = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    data = json.loads(_sidecar_path(path).read_text())
    report = SolverReport(**data)
    return _wrap_plan(vals, report.final_residual), report
