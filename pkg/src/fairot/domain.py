"""Core data types shared by every solver.

Datasets carry feature points with per-point group labels and implicit
uniform weights.  Transport plans couple two such datasets with uniform
marginals 1/n and 1/m.  All types are immutable after construction: the
wrapped arrays are marked read-only, so concurrent readers are safe and
no operation mutates its inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import xlogy

# Marginal tolerance on constructed plans.  Solver stopping criteria are
# configured separately; construction beyond this tolerance fails loudly
# unless the caller passes the residual it actually achieved.
TAU_MARG = 1e-7


def _readonly(a: np.ndarray) -> np.ndarray:
    """Return a float64 copy with the writeable flag cleared."""
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


class LabeledDataset:
    """Feature points with sensitive group labels, one side of a matching.

    Parameters
    ----------
    points : array-like, shape (n, d)
        Feature vectors.  All points share the dimension d >= 1.
    labels : array-like of int, shape (n,)
        Group index of every point, 1-based, in {1, ..., num_groups}.
    num_groups : int, optional
        Group count.  Defaults to ``max(labels)``; passing it explicitly
        allows trailing empty groups.
    """

    def __init__(self, points, labels, num_groups: int | None = None):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lab = np.asarray(labels, dtype=np.int64).ravel()
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"points must be a nonempty n x d array, got shape {pts.shape}")
        if lab.shape[0] != pts.shape[0]:
            raise ValueError(f"{lab.shape[0]} labels for {pts.shape[0]} points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite entries")
        k = int(lab.max()) if num_groups is None else int(num_groups)
        if lab.min() < 1 or lab.max() > k:
            raise ValueError(f"labels must lie in {{1..{k}}}, got range [{lab.min()}, {lab.max()}]")
        self.points = _readonly(pts)
        self.labels = np.array(lab, copy=True)
        self.labels.flags.writeable = False
        self.num_groups = k

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def group_counts(self) -> np.ndarray:
        """Per-group point counts, length num_groups."""
        return np.bincount(self.labels - 1, minlength=self.num_groups)

    @property
    def group_marginal(self) -> np.ndarray:
        """Empirical group marginal; sums to 1 exactly up to rounding."""
        return self.group_counts / self.n

    def to_csv(self, path) -> None:
        """Write the dataset in the interchange format x1..xd,label."""
        header = [f"x{k + 1}" for k in range(self.dim)] + ["label"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row, lab in zip(self.points, self.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(lab)])

    @classmethod
    def from_csv(cls, path) -> "LabeledDataset":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[-1] != "label":
                raise ValueError(f"{path}: expected header ending in 'label', got {header}")
            rows = [r for r in reader if r]
        if not rows:
            raise ValueError(f"{path}: no data rows")
        pts = np.array([[float(v) for v in r[:-1]] for r in rows])
        labs = np.array([int(r[-1]) for r in rows])
        return cls(pts, labs)


class CostMatrix:
    """Ground-cost matrix between two datasets; entries finite and >= 0."""

    def __init__(self, values):
        vals = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if not np.all(np.isfinite(vals)):
            raise ValueError("cost matrix contains non-finite entries")
        if vals.min() < 0:
            raise ValueError(f"cost matrix has negative entry {vals.min()}")
        self.values = _readonly(vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


class TransportPlan:
    """Coupling of two uniform empirical measures.

    Rows sum to 1/n and columns to 1/m within ``tol`` (default TAU_MARG);
    construction fails loudly beyond it.  Solvers that stop at a looser
    residual pass that residual as ``tol``.
    """

    def __init__(self, values, tol: float = TAU_MARG):
        vals = np.atleast_2d(np.asarray(values, dtype=np.float64))
        n, m = vals.shape
        if not np.all(np.isfinite(vals)):
            raise ValueError("plan contains non-finite entries")
        if vals.min() < 0:
            raise ValueError(f"plan has negative entry {vals.min()}")
        row_dev = np.abs(vals.sum(axis=1) - 1.0 / n).max()
        col_dev = np.abs(vals.sum(axis=0) - 1.0 / m).max()
        mass_dev = abs(vals.sum() - 1.0)
        worst = max(row_dev, col_dev, mass_dev)
        if worst > tol:
            raise ValueError(
                f"plan violates marginal constraints: worst deviation {worst:.3e} > {tol:.1e}"
            )
        self.values = _readonly(vals)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def row_mass(self) -> float:
        return 1.0 / self.n

    @property
    def col_mass(self) -> float:
        return 1.0 / self.m


@dataclass(frozen=True)
class GroupPair:
    """A (source group, destination group) index pair, 1-based."""

    s: int
    w: int

    def __post_init__(self):
        if self.s < 1 or self.w < 1:
            raise ValueError(f"group indices are 1-based, got ({self.s}, {self.w})")

    def check_range(self, num_src: int, num_dst: int) -> "GroupPair":
        if self.s > num_src or self.w > num_dst:
            raise ValueError(f"group pair ({self.s}, {self.w}) outside {num_src} x {num_dst}")
        return self


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _as_values(plan) -> np.ndarray:
    return plan.values if isinstance(plan, (TransportPlan, CostMatrix)) else np.asarray(plan, dtype=np.float64)


def _label_onehot(labels, length: int, num_groups: int | None) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).ravel()
    if lab.shape[0] != length:
        raise ValueError(f"{lab.shape[0]} labels for axis of size {length}")
    k = int(lab.max()) if num_groups is None else int(num_groups)
    if lab.min() < 1 or lab.max() > k:
        raise ValueError(f"labels must lie in {{1..{k}}}")
    onehot = np.zeros((length, k))
    onehot[np.arange(length), lab - 1] = 1.0
    return onehot


def group_coupling(plan, src_labels, dst_labels,
                   num_src_groups: int | None = None,
                   num_dst_groups: int | None = None) -> np.ndarray:
    """Marginalize a plan onto group-pair space.

    Entry (s, w) is the total plan mass carried between source group s
    and destination group w.  Group indicator matrices are never
    materialized at n x m size; the sums are label-indexed contractions.

    Returns the K_s x K_w coupling matrix; its entries sum to the total
    plan mass and its margins are the empirical group marginals.
    """
    vals = _as_values(plan)
    src = _label_onehot(src_labels, vals.shape[0], num_src_groups)
    dst = _label_onehot(dst_labels, vals.shape[1], num_dst_groups)
    return src.T @ vals @ dst


def transport_cost(plan, cost) -> float:
    """Frobenius inner product of the plan with the cost matrix."""
    p = _as_values(plan)
    c = _as_values(cost)
    if p.shape != c.shape:
        raise ValueError(f"plan shape {p.shape} != cost shape {c.shape}")
    return float(np.vdot(p, c))


def entropy_term(plan) -> float:
    """Sum of p*log(p) over plan entries, with the convention 0*log 0 = 0.

    This is the (negative-entropy) regularizer added to the transport
    cost with weight epsilon.
    """
    p = _as_values(plan)
    if p.min() < 0:
        raise ValueError("entropy_term expects nonnegative entries")
    return float(xlogy(p, p).sum())


def squared_euclidean_cost(src: LabeledDataset, dst: LabeledDataset) -> CostMatrix:
    """Pairwise squared Euclidean distances, the default base cost."""
    x = src.points if isinstance(src, LabeledDataset) else np.asarray(src, dtype=np.float64)
    y = dst.points if isinstance(dst, LabeledDataset) else np.asarray(dst, dtype=np.float64)
    diff = x[:, None, :] - y[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    # rounding can leave tiny negatives on coincident points
    return CostMatrix(np.maximum(sq, 0.0))


def uniform_plan(n: int, m: int) -> TransportPlan:
    """The independent coupling; feasible for any instance."""
    return TransportPlan(np.full((n, m), 1.0 / (n * m)))
