"""Fairness-penalized entropic transport via generalized conditional
gradient.

The penalty keeps the objective smooth but non-quadratic, so each outer
step linearizes only the penalty: the descent direction solves an
entropic transport problem with the modified cost C + penalty *
grad(L_F), keeping the entropy term exact in the subproblem.  A
backtracking Armijo search then picks the convex-combination step.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .domain import TAU_MARG, TransportPlan, _as_values, entropy_term, transport_cost
from .fairness import _target_matrix, fairness_loss, fairness_loss_grad
from .sinkhorn import SinkhornConfig, SolverReport, sinkhorn


@dataclass(frozen=True)
class GcgConfig:
    """Outer-loop settings for the penalized solver.

    ``sinkhorn`` provides the shared entropic settings; inner direction
    solves run at most ``num_inner_iter_max`` iterations of it, warm
    started from the previous direction's duals.
    """

    penalty: float
    num_iter_max: int = 2000
    num_inner_iter_max: int = 200
    stop_thr: float = 1e-9       # relative objective decrease
    stop_thr2: float = 1e-9      # absolute objective decrease
    sinkhorn: SinkhornConfig = SinkhornConfig()

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError(f"penalty must be >= 0, got {self.penalty}")
        if self.stop_thr <= 0 or self.stop_thr2 <= 0:
            raise ValueError("stopping thresholds must be positive")
        if self.num_iter_max < 1 or self.num_inner_iter_max < 1:
            raise ValueError("iteration limits must be >= 1")


@dataclass(frozen=True)
class GcgIterate:
    """One row of the outer-iteration trace."""

    iteration: int
    objective: float
    transport_cost: float
    fairness_loss: float
    alpha: float


def penalized_objective(plan, cost, epsilon: float, penalty: float,
                        target, src_labels, dst_labels) -> float:
    """Transport cost + epsilon * entropy + penalty * fairness loss."""
    return (transport_cost(plan, cost)
            + epsilon * entropy_term(plan)
            + penalty * fairness_loss(plan, target, src_labels, dst_labels))


def armijo_step(objective, current: np.ndarray, direction: np.ndarray, slope: float,
                c1: float = 1e-4, beta: float = 0.5, kmax: int = 30) -> tuple[float, float]:
    """Backtracking step size along direction - current.

    Evaluates ``objective`` on the convex combinations
    (1 - alpha) * current + alpha * direction for alpha in
    {1, beta, beta^2, ...} and returns the first alpha satisfying the
    sufficient-decrease condition obj <= obj(current) + c1 * alpha *
    slope, together with the objective value there.  ``slope`` is the
    directional derivative at the current point; -inf (a one-sided
    limit at a zero plan entry moving inward) makes that bound vacuous,
    so those steps instead require plain descent to keep the outer
    trace monotone.  If no trial passes, the last (smallest) alpha is
    returned with a warning: the convex combination is feasible
    regardless.
    """
    base = objective(current)
    alpha = 1.0
    value = base
    failed_alpha = failed_value = None
    for _ in range(kmax + 1):
        value = objective((1.0 - alpha) * current + alpha * direction)
        bound = base if slope == -np.inf else base + c1 * alpha * slope
        if np.isfinite(value) and value <= bound:
            if failed_alpha is not None and np.isfinite(slope):
                # the rejected trial brackets the 1-d minimizer; polish the
                # accepted halving with the quadratic through (0, base) with
                # this slope and the rejected point, which avoids the
                # resonance that stalls progress under a stiff penalty
                denom = 2.0 * (failed_value - base - slope * failed_alpha)
                if np.isfinite(denom) and denom > 0.0:
                    cand = -slope * failed_alpha ** 2 / denom
                    if 0.0 < cand < 1.0:
                        polished = objective((1.0 - cand) * current + cand * direction)
                        if (np.isfinite(polished)
                                and polished <= min(value, base + c1 * cand * slope)):
                            return cand, polished
            return alpha, value
        failed_alpha, failed_value = alpha, value
        alpha *= beta
    alpha /= beta  # undo the final unused shrink
    warnings.warn(f"no Armijo step accepted after {kmax} backtracks; using alpha={alpha:.3g}")
    return alpha, value


def _entropic_slope(plan: np.ndarray, delta: np.ndarray) -> float:
    """Directional derivative of sum(p log p) at plan along delta.

    Zero entries contribute 0 where delta is also zero and -inf where
    mass moves in (one-sided limit); mass cannot move out of a zero
    entry of a feasible segment.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (1.0 + np.log(plan)) * delta
    terms[(plan == 0.0) & (delta == 0.0)] = 0.0
    if np.isneginf(terms).any():
        return -np.inf
    return float(terms.sum())


def penalized_gcg(cost, target, src_labels, dst_labels,
                  cfg: GcgConfig) -> tuple[TransportPlan, SolverReport, list[GcgIterate]]:
    """Minimize the penalized objective over the transport polytope.

    Starts from the vanilla entropic plan; each outer step solves an
    entropic transport problem with the penalty linearized into the
    cost, then line-searches the convex combination.  Stops when the
    objective decrease falls below either threshold.

    Returns the plan, a report, and the per-iteration trace.
    """
    c = _as_values(cost)
    fmat = _target_matrix(target)
    eps = cfg.sinkhorn.epsilon
    lam = cfg.penalty
    t0 = time.perf_counter()

    plan0, duals, rep0 = sinkhorn(c, cfg.sinkhorn)
    if not rep0.converged:
        warnings.warn("initial entropic solve did not converge; continuing from its iterate")
    plan = plan0.values.copy()
    residual = rep0.final_residual

    def objective_of(p) -> float:
        return (float(np.vdot(p, c)) + eps * entropy_term(p)
                + lam * fairness_loss(p, fmat, src_labels, dst_labels))

    obj = objective_of(plan)
    trace = [GcgIterate(0, obj, transport_cost(plan, c),
                        fairness_loss(plan, fmat, src_labels, dst_labels), 0.0)]
    converged = False
    delta_abs = np.inf
    inner_cfg = replace(cfg.sinkhorn, max_iter=cfg.num_inner_iter_max, warm_start=duals)
    it = 0
    for it in range(1, cfg.num_iter_max + 1):
        grad_pen = fairness_loss_grad(plan, fmat, src_labels, dst_labels)
        modified = c + lam * grad_pen
        direction_plan, duals, inner_rep = sinkhorn(modified, inner_cfg)
        inner_cfg = replace(inner_cfg, warm_start=duals)
        direction = direction_plan.values
        residual = max(residual, inner_rep.final_residual)
        delta = direction - plan
        # the direction minimizes G(X) = <modified, X> + eps * entropy(X), so
        # the surrogate gap G(plan) - G(direction) bounds the suboptimality
        # of the penalized objective from above and the directional
        # derivative from below; unlike the analytic slope it does not
        # cancel catastrophically when the penalty is stiff
        gap = (float(np.vdot(modified, -delta))
               + eps * (entropy_term(plan) - entropy_term(direction)))
        if gap <= cfg.stop_thr2:
            if inner_rep.converged:
                # no descent worth more than the absolute threshold is left
                converged = True
                break
            # the direction is unconverged and offers no descent yet; keep
            # the plan and let the warm-started inner solve refine it on
            # the next pass (the modified cost is unchanged, so its dual
            # iteration simply continues)
            trace.append(GcgIterate(it, obj, transport_cost(plan, c),
                                    fairness_loss(plan, fmat, src_labels, dst_labels), 0.0))
            continue
        slope = min(float(np.vdot(modified, delta)) + eps * _entropic_slope(plan, delta),
                    -gap)
        alpha, new_obj = armijo_step(objective_of, plan, direction, slope)
        plan = (1.0 - alpha) * plan + alpha * direction
        delta_abs = obj - new_obj
        delta_rel = abs(delta_abs) / max(abs(new_obj), 1e-300)
        obj = new_obj
        trace.append(GcgIterate(it, obj, transport_cost(plan, c),
                                fairness_loss(plan, fmat, src_labels, dst_labels), alpha))
        if abs(delta_abs) < cfg.stop_thr2 or delta_rel < cfg.stop_thr:
            converged = True
            break

    final_fl = fairness_loss(plan, fmat, src_labels, dst_labels)
    report = SolverReport(
        converged=converged,
        iterations=it,
        final_residual=float(abs(delta_abs)) if np.isfinite(delta_abs) else residual,
        objective=obj,
        transport_cost=transport_cost(plan, c),
        fairness_loss=final_fl,
        wall_time_seconds=time.perf_counter() - t0,
    )
    return TransportPlan(plan, tol=max(TAU_MARG, residual * (1.0 + 1e-9))), report, trace


def trace_to_rows(trace: list[GcgIterate]) -> list[dict]:
    """Trace rows as dicts in the documented CSV column order."""
    return [
        {
            "iter": r.iteration,
            "objective": r.objective,
            "transport_cost": r.transport_cost,
            "fairness_loss": r.fairness_loss,
            "alpha": r.alpha,
        }
        for r in trace
    ]
