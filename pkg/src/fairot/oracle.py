"""Slow reference solvers used only for verification.

These deliberately share no iteration code with the production solvers:
the plan is rebuilt densely from dual variables at every step and the
dual is maximized by full-gradient ascent with backtracking, so a bug in
the scaling iterations cannot hide here.  Sizes are capped; performance
is a non-goal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import TransportPlan, _as_values, group_coupling

_MAX_SIDE = 32


@dataclass(frozen=True)
class OracleConfig:
    """Settings for the dual-ascent reference solvers."""

    epsilon: float = 1.0
    grad_tol: float = 1e-10   # infinity norm of the dual gradient
    max_iter: int = 1_000_000


@dataclass(frozen=True)
class OracleResult:
    """Reference solution with the duals that generated it."""

    plan: TransportPlan
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray | None
    converged: bool
    iterations: int
    grad_norm: float


def _ascend(value_grads_curv, variables, grad_tol, max_iter):
    """Diagonally preconditioned gradient ascent with backtracking.

    ``value_grads_curv`` maps the variable list to (value, gradients,
    positive diagonal curvature estimates); the ascent direction is the
    gradient divided by the curvature, Armijo-backtracked on the dual
    value.  Near the optimum the predicted improvement drops below the
    value's floating-point resolution, so steps whose prediction is
    unresolvable are accepted as long as the value does not decrease
    beyond rounding noise.

    Returns (variables, converged, iterations, final grad norm).
    """
    step = 1.0
    omega = 0.5           # damping cap once value differences underflow
    stall = 0
    prev_gnorm = np.inf
    val, grads, curv = value_grads_curv(variables)
    for it in range(1, max_iter + 1):
        gnorm = max(float(np.abs(g).max()) for g in grads)
        if gnorm <= grad_tol:
            return variables, True, it - 1, gnorm
        dirs = [g / c for g, c in zip(grads, curv)]
        slope = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        floor = 8.0 * np.finfo(float).eps * max(1.0, abs(val))
        accepted = False
        trial_step = step
        for _ in range(60):
            if 1e-4 * trial_step * slope <= floor:
                # improvement below the value's float resolution: take a
                # damped fixed-point step instead of testing the value
                trial_step = min(trial_step, omega)
                variables = [v + trial_step * d for v, d in zip(variables, dirs)]
                val, grads, curv = value_grads_curv(variables)
                if gnorm >= prev_gnorm:
                    stall += 1
                    if stall >= 100:
                        omega = max(omega * 0.5, 1e-4)
                        stall = 0
                else:
                    stall = 0
                prev_gnorm = gnorm
                step = trial_step
                accepted = True
                break
            trial = [v + trial_step * d for v, d in zip(variables, dirs)]
            tval, tgrads, tcurv = value_grads_curv(trial)
            if np.isfinite(tval) and tval >= val + 1e-4 * trial_step * slope:
                variables, val, grads, curv = trial, tval, tgrads, tcurv
                step = min(trial_step * 1.3, 8.0)
                accepted = True
                break
            trial_step *= 0.5
        if not accepted:
            gnorm = max(float(np.abs(g).max()) for g in grads)
            return variables, gnorm <= grad_tol, it, gnorm
    gnorm = max(float(np.abs(g).max()) for g in grads)
    return variables, gnorm <= grad_tol, max_iter, gnorm


def dual_ascent_entropic(cost, cfg: OracleConfig = OracleConfig()) -> OracleResult:
    """Reference solver for uniform-marginal entropic transport.

    Maximizes the concave dual over (f, g); the induced primal plan is
    exp((f_i + g_j - C_ij)/eps - 1).  Gradient components are the
    marginal residuals, driven below ``cfg.grad_tol`` in infinity norm.
    """
    c = _as_values(cost)
    n, m = c.shape
    if n > _MAX_SIDE or m > _MAX_SIDE:
        raise ValueError(f"oracle limited to sides <= {_MAX_SIDE}, got {c.shape}")
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    eps = cfg.epsilon

    def value_grads_curv(vs):
        f, g = vs
        plan = np.exp((f[:, None] + g[None, :] - c) / eps - 1.0)
        val = float(f @ a + g @ b - eps * plan.sum())
        grads = [a - plan.sum(axis=1), b - plan.sum(axis=0)]
        curv = [np.maximum(plan.sum(axis=1), 1e-300) / eps,
                np.maximum(plan.sum(axis=0), 1e-300) / eps]
        return val, grads, curv

    (f, g), ok, iters, gnorm = _ascend(
        value_grads_curv, [np.zeros(n), np.zeros(m)], cfg.grad_tol, cfg.max_iter
    )
    if not ok:
        raise RuntimeError(f"oracle dual ascent failed: grad norm {gnorm:.2e} after {iters} iterations")
    plan = np.exp((f[:, None] + g[None, :] - c) / eps - 1.0)
    return OracleResult(TransportPlan(plan, tol=max(1e-9, 10 * gnorm)), f, g, None, ok, iters, gnorm)


def dual_ascent_fair(cost, target, src_labels, dst_labels,
                     cfg: OracleConfig = OracleConfig()) -> OracleResult:
    """Reference solver with exact group-coupling constraints.

    Extends the entropic dual with one multiplier per group pair; the
    extra gradient components are the deviations of the induced group
    coupling from the target.  The target must be a strictly positive
    coupling of the empirical group marginals.
    """
    c = _as_values(cost)
    n, m = c.shape
    if n > _MAX_SIDE or m > _MAX_SIDE:
        raise ValueError(f"oracle limited to sides <= {_MAX_SIDE}, got {c.shape}")
    fmat = np.asarray(getattr(target, "matrix", target), dtype=np.float64)
    src = np.asarray(src_labels, dtype=np.int64).ravel() - 1
    dst = np.asarray(dst_labels, dtype=np.int64).ravel() - 1
    ks, kw = fmat.shape
    if fmat.min() <= 0:
        raise ValueError("fair oracle requires a strictly positive target")
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    eps = cfg.epsilon
    block = fmat  # alias for readability in the closures

    def plan_of(f, g, h):
        return np.exp((f[:, None] + g[None, :] + h[src][:, dst] - c) / eps - 1.0)

    def value_grads_curv(vs):
        f, g, h = vs
        plan = plan_of(f, g, h)
        val = float(f @ a + g @ b + np.vdot(h, block) - eps * plan.sum())
        gc = group_coupling(plan, src + 1, dst + 1, ks, kw)
        grads = [a - plan.sum(axis=1), b - plan.sum(axis=0), block - gc]
        curv = [np.maximum(plan.sum(axis=1), 1e-300) / eps,
                np.maximum(plan.sum(axis=0), 1e-300) / eps,
                np.maximum(gc, 1e-300) / eps]
        return val, grads, curv

    (f, g, h), ok, iters, gnorm = _ascend(
        value_grads_curv, [np.zeros(n), np.zeros(m), np.zeros((ks, kw))],
        cfg.grad_tol, cfg.max_iter,
    )
    if not ok:
        raise RuntimeError(f"fair oracle dual ascent failed: grad norm {gnorm:.2e} after {iters} iterations")
    # the multipliers are only identified up to per-group shifts absorbed
    # by f and g; canonicalize by double-centering h so that inactive
    # constraints report h = 0
    row_shift = h.mean(axis=1)
    col_shift = (h - row_shift[:, None]).mean(axis=0)
    h = h - row_shift[:, None] - col_shift[None, :]
    f = f + row_shift[src]
    g = g + col_shift[dst]
    plan = plan_of(f, g, h)
    return OracleResult(TransportPlan(plan, tol=max(1e-9, 10 * gnorm)), f, g, h, ok, iters, gnorm)


def finite_diff(fun, point, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    ``point`` is flattened; the estimate has the same shape as the
    input.  Non-finite evaluations propagate into the result.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(point, dtype=np.float64)
    flat = x.ravel()
    grad = np.empty_like(flat)
    for k in range(flat.size):
        bumped = flat.copy()
        bumped[k] = flat[k] + step
        hi = fun(bumped.reshape(x.shape))
        bumped[k] = flat[k] - step
        lo = fun(bumped.reshape(x.shape))
        grad[k] = (hi - lo) / (2.0 * step)
    return grad.reshape(x.shape)
