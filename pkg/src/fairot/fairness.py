"""Fairness targets and the relaxed fairness loss.

A target prescribes how much plan mass each (source group, destination
group) pair must carry; a valid target is itself a coupling of the two
empirical group marginals.  The loss measures squared deviation of a
plan's group coupling from the target and is the quantity penalized and
minimized throughout the toolkit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .domain import LabeledDataset, TransportPlan, _as_values, _readonly, group_coupling

logger = logging.getLogger(__name__)

# Targets are user-specified exact rationals in practice, so validation
# against empirical marginals is tight.
TAU_F = 1e-8


class InfeasibleTargetError(ValueError):
    """Raised when a requested target cannot be realized."""


class FairnessTarget:
    """Prescribed inter-group matching probabilities, K_s x K_w.

    Construction checks only nonnegativity and finiteness so that
    invalid candidates can still be passed to :func:`validate_target`
    for a structured report.
    """

    def __init__(self, matrix):
        mat = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        if not np.all(np.isfinite(mat)):
            raise ValueError("target contains non-finite entries")
        if mat.min() < 0:
            raise ValueError(f"target has negative entry {mat.min()}")
        self.matrix = _readonly(mat)

    @property
    def num_src_groups(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_dst_groups(self) -> int:
        return self.matrix.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.matrix:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "FairnessTarget":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls(np.array(rows))


@dataclass(frozen=True)
class TargetValidation:
    """Outcome of checking a target against empirical group marginals."""

    valid: bool
    worst_kind: str | None = None      # "row" | "col" | None
    worst_index: int | None = None     # 1-based group index on the failing side
    worst_magnitude: float = 0.0
    repaired: FairnessTarget | None = None


def _target_matrix(target) -> np.ndarray:
    return np.asarray(getattr(target, "matrix", target), dtype=np.float64)


def validate_target(target, src: LabeledDataset, dst: LabeledDataset,
                    repair: bool = False, tol: float = TAU_F) -> TargetValidation:
    """Check that a target couples the empirical group marginals.

    Row sums must equal the source marginal and column sums the
    destination marginal, each within ``tol``.  On failure the report
    carries the worst-violated side, its 1-based group index, and the
    magnitude.  With ``repair=True`` an iterative proportional fitting
    of the target onto the marginal polytope is attached to the report
    (and logged); the input is never modified in place.
    """
    fmat = _target_matrix(target)
    p = src.group_marginal
    q = dst.group_marginal
    if fmat.shape != (p.size, q.size):
        raise ValueError(f"target shape {fmat.shape} does not match group counts ({p.size}, {q.size})")
    row_dev = fmat.sum(axis=1) - p
    col_dev = fmat.sum(axis=0) - q
    worst_row = int(np.abs(row_dev).argmax())
    worst_col = int(np.abs(col_dev).argmax())
    if np.abs(row_dev).max() >= np.abs(col_dev).max():
        kind, index, mag = "row", worst_row + 1, float(np.abs(row_dev).max())
    else:
        kind, index, mag = "col", worst_col + 1, float(np.abs(col_dev).max())
    if mag <= tol:
        return TargetValidation(valid=True, worst_magnitude=mag)
    repaired = None
    if repair:
        repaired = FairnessTarget(_ipf_repair(fmat, p, q))
        logger.warning(
            "fairness target repaired onto empirical marginals "
            "(worst %s-sum violation %.3e at group %d)", kind, mag, index
        )
    return TargetValidation(valid=False, worst_kind=kind, worst_index=index,
                            worst_magnitude=mag, repaired=repaired)


def _ipf_repair(fmat: np.ndarray, p: np.ndarray, q: np.ndarray,
                max_iter: int = 1000, tol: float = 1e-12) -> np.ndarray:
    """Alternating row/column rescaling of F onto the marginal polytope."""
    if np.any((fmat.sum(axis=1) == 0) & (p > 0)) or np.any((fmat.sum(axis=0) == 0) & (q > 0)):
        raise InfeasibleTargetError("cannot repair a target with an all-zero row or column "
                                    "carrying positive marginal mass")
    out = fmat.copy()
    for _ in range(max_iter):
        rows = out.sum(axis=1)
        out *= np.divide(p, rows, out=np.ones_like(p), where=rows > 0)[:, None]
        cols = out.sum(axis=0)
        out *= np.divide(q, cols, out=np.ones_like(q), where=cols > 0)[None, :]
        resid = max(np.abs(out.sum(axis=1) - p).max(), np.abs(out.sum(axis=0) - q).max())
        if resid < tol:
            break
    return out


def target_from_quota(p: np.ndarray, q: np.ndarray, quota: float) -> FairnessTarget:
    """Two-group quota construction.

    A share ``quota`` of group-1 source mass is sent to group-2
    destinations; the second row takes up the remaining column mass.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.size != 2 or q.size != 2:
        raise ValueError("quota construction is defined for two groups on each side")
    if not 0.0 <= quota <= 1.0:
        raise ValueError(f"quota must lie in [0, 1], got {quota}")
    fmat = np.array([
        [(1.0 - quota) * p[0], quota * p[0]],
        [q[0] - (1.0 - quota) * p[0], q[1] - quota * p[0]],
    ])
    if fmat.min() < 0:
        s, w = np.unravel_index(int(fmat.argmin()), fmat.shape)
        raise InfeasibleTargetError(
            f"quota {quota} infeasible: entry ({s + 1},{w + 1}) = {fmat[s, w]:.6g} < 0"
        )
    return FairnessTarget(fmat)


def product_fair_plan(src: LabeledDataset, dst: LabeledDataset, target) -> TransportPlan:
    """Explicit fair plan spreading each block's target mass uniformly.

    Entry (i, j) is F[s_i, w_j] / (n_{s_i} * m_{w_j}); the result meets
    the group-coupling target exactly and is the standard feasibility
    witness (and a safe initializer).
    """
    fmat = _target_matrix(target)
    report = validate_target(fmat, src, dst)
    if not report.valid:
        raise InfeasibleTargetError(
            f"target is not a coupling of the empirical marginals "
            f"(worst {report.worst_kind}-sum violation {report.worst_magnitude:.3e})"
        )
    ns = src.group_counts
    mw = dst.group_counts
    for s in range(fmat.shape[0]):
        for w in range(fmat.shape[1]):
            if fmat[s, w] > 0 and (ns[s] == 0 or mw[w] == 0):
                raise InfeasibleTargetError(
                    f"group pair ({s + 1},{w + 1}) has target mass {fmat[s, w]:.6g} "
                    "but an empty group"
                )
    denom = np.outer(ns, mw).astype(np.float64)
    ratio = np.divide(fmat, denom, out=np.zeros_like(fmat), where=denom > 0)
    plan = ratio[src.labels - 1][:, dst.labels - 1]
    return TransportPlan(plan)


def fairness_loss(plan, target, src_labels, dst_labels) -> float:
    """Sum of squared deviations of the group coupling from the target."""
    fmat = _target_matrix(target)
    gc = group_coupling(plan, src_labels, dst_labels, fmat.shape[0], fmat.shape[1])
    return float(((gc - fmat) ** 2).sum())


def fairness_loss_grad(plan, target, src_labels, dst_labels) -> np.ndarray:
    """Gradient of :func:`fairness_loss` with respect to the plan.

    Entry (i, j) is 2 * (coupling - F)[s_i, w_j]; the factor 2 is the
    exact derivative, kept explicit so downstream penalty weights carry
    no hidden scaling.  The gradient is blockwise constant.
    """
    fmat = _target_matrix(target)
    gc = group_coupling(plan, src_labels, dst_labels, fmat.shape[0], fmat.shape[1])
    dev = 2.0 * (gc - fmat)
    src = np.asarray(src_labels, dtype=np.int64).ravel() - 1
    dst = np.asarray(dst_labels, dtype=np.int64).ravel() - 1
    return dev[src][:, dst]
