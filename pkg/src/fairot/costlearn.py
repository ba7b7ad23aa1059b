"""Bilevel ground-cost learning.

The outer problem tunes cost parameters so that the *inner* entropic
transport plan scores low fairness loss, with a discrepancy term
(1/tradeoff) * ||C_theta - C_base||_F^2 anchoring the learned cost to a
base cost (squared Euclidean here).  Outer gradients are obtained by
reverse accumulation through the last ``unroll_length`` inner scaling
updates, treating the state at the unroll boundary as constant; the
cost-family parameter gradients are then chained on.  Every gradient
path in this module is validated against central finite differences in
the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .domain import LabeledDataset, CostMatrix, squared_euclidean_cost
from .fairness import _target_matrix, fairness_loss, fairness_loss_grad
from .sinkhorn import SinkhornConfig, SolverReport, sinkhorn

# quadratic forms of a PSD-within-tolerance matrix may round slightly
# below zero; anything worse indicates a genuinely indefinite matrix
_PSD_SLACK = 1e-10


# ---------------------------------------------------------------------------
# cost families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MahalanobisModel:
    """Symmetric PSD matrix M defining cost (x - y)^T M (x - y)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got shape {m.shape}")
        if np.abs(m - m.T).max() > 1e-12:
            raise ValueError("matrix is not symmetric")
        if np.linalg.eigvalsh(m).min() < -_PSD_SLACK:
            raise ValueError("matrix is not positive semidefinite")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, dim: int) -> "MahalanobisModel":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def to_vector(self) -> np.ndarray:
        return self.matrix.ravel().copy()

    @classmethod
    def from_vector(cls, dim: int, vec: np.ndarray) -> "MahalanobisModel":
        return cls(np.asarray(vec, dtype=np.float64).reshape(dim, dim))


@dataclass(frozen=True)
class MlpModel:
    """Two feature towers; cost is the squared distance of embeddings.

    Each tower is a fully connected network with two ReLU hidden layers
    of width ``hidden`` and a linear output of dimension ``out_dim``.
    Layers are stored as (weight, bias) pairs with weight shape
    (fan_out, fan_in).
    """

    dim: int
    hidden: int
    out_dim: int
    tower_src: tuple[tuple[np.ndarray, np.ndarray], ...]
    tower_dst: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        for name, tower in (("tower_src", self.tower_src), ("tower_dst", self.tower_dst)):
            shapes = [self.dim, self.hidden, self.hidden, self.out_dim]
            if len(tower) != 3:
                raise ValueError(f"{name} must have 3 layers, got {len(tower)}")
            clean = []
            for k, (w, b) in enumerate(tower):
                w = np.asarray(w, dtype=np.float64)
                b = np.asarray(b, dtype=np.float64)
                if w.shape != (shapes[k + 1], shapes[k]) or b.shape != (shapes[k + 1],):
                    raise ValueError(
                        f"{name} layer {k}: weight {w.shape} / bias {b.shape} do not chain "
                        f"{shapes[k]} -> {shapes[k + 1]}"
                    )
                if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                    raise ValueError(f"{name} layer {k} has non-finite parameters")
                clean.append((w, b))
            object.__setattr__(self, name, tuple(clean))

    @classmethod
    def init(cls, dim: int, hidden: int = 32, out_dim: int = 2, seed: int = 0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        shapes = [dim, hidden, hidden, out_dim]

        def tower():
            layers = []
            for fan_in, fan_out in zip(shapes[:-1], shapes[1:]):
                scale = np.sqrt(6.0 / (fan_in + fan_out))
                layers.append((rng.uniform(-scale, scale, (fan_out, fan_in)), np.zeros(fan_out)))
            return tuple(layers)

        return cls(dim, hidden, out_dim, tower(), tower())

    def to_vector(self) -> np.ndarray:
        parts = []
        for tower in (self.tower_src, self.tower_dst):
            for w, b in tower:
                parts.append(w.ravel())
                parts.append(b.ravel())
        return np.concatenate(parts)

    def from_vector(self, vec: np.ndarray) -> "MlpModel":
        vec = np.asarray(vec, dtype=np.float64)
        towers = []
        pos = 0
        for tower in (self.tower_src, self.tower_dst):
            layers = []
            for w, b in tower:
                layers.append((vec[pos:pos + w.size].reshape(w.shape),
                               vec[pos + w.size:pos + w.size + b.size]))
                pos += w.size + b.size
            towers.append(tuple(layers))
        if pos != vec.size:
            raise ValueError(f"vector length {vec.size} does not match parameter count {pos}")
        return MlpModel(self.dim, self.hidden, self.out_dim, towers[0], towers[1])


def _points(data) -> np.ndarray:
    return data.points if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)


def mahalanobis_cost(model, x, y, with_grad: bool = False):
    """Quadratic-form cost matrix, optionally with per-entry gradients.

    The gradient of entry (i, j) with respect to M is the outer product
    of the difference vector with itself, returned as an (n, m, d, d)
    tensor when ``with_grad`` is set.
    """
    m = model.matrix if isinstance(model, MahalanobisModel) else np.asarray(model, dtype=np.float64)
    if np.linalg.eigvalsh((m + m.T) / 2).min() < -_PSD_SLACK:
        raise ValueError("mahalanobis_cost requires a PSD matrix")
    xs, ys = _points(x), _points(y)
    diff = xs[:, None, :] - ys[None, :, :]
    vals = np.einsum("ijk,kl,ijl->ij", diff, m, diff)
    cost = CostMatrix(np.maximum(vals, 0.0))
    if not with_grad:
        return cost
    return cost, np.einsum("ijk,ijl->ijkl", diff, diff)


def _mahalanobis_vjp(upstream: np.ndarray, x, y) -> np.ndarray:
    """Gradient of sum(upstream * C) with respect to M."""
    xs, ys = _points(x), _points(y)
    diff = xs[:, None, :] - ys[None, :, :]
    return np.einsum("ij,ijk,ijl->kl", upstream, diff, diff)


def _tower_forward(tower, inputs: np.ndarray):
    acts = [inputs]
    pre = []
    out = inputs
    for k, (w, b) in enumerate(tower):
        z = out @ w.T + b
        pre.append(z)
        out = np.maximum(z, 0.0) if k < len(tower) - 1 else z
        acts.append(out)
    return out, (acts, pre)


def _tower_backward(tower, cache, d_out: np.ndarray):
    acts, pre = cache
    grads = []
    grad = d_out
    for k in range(len(tower) - 1, -1, -1):
        w, _ = tower[k]
        if k < len(tower) - 1:
            grad = grad * (pre[k] > 0)  # ReLU subgradient, 0 at exactly 0
        grads.append((grad.T @ acts[k], grad.sum(axis=0)))
        grad = grad @ w
    return list(reversed(grads))


def mlp_cost(model: MlpModel, x, y, with_grad: bool = False):
    """Embedding-distance cost matrix from the two towers.

    With ``with_grad`` the return value includes a reverse-mode closure
    mapping an upstream (n, m) weighting G to the gradient of
    sum(G * C) over all parameters, flattened in ``to_vector`` order.
    """
    xs, ys = _points(x), _points(y)
    if xs.shape[1] != model.dim or ys.shape[1] != model.dim:
        raise ValueError(f"model expects dimension {model.dim}, got {xs.shape[1]} and {ys.shape[1]}")
    emb_x, cache_x = _tower_forward(model.tower_src, xs)
    emb_y, cache_y = _tower_forward(model.tower_dst, ys)
    sq_x = (emb_x ** 2).sum(axis=1)
    sq_y = (emb_y ** 2).sum(axis=1)
    vals = sq_x[:, None] + sq_y[None, :] - 2.0 * emb_x @ emb_y.T
    cost = CostMatrix(np.maximum(vals, 0.0))
    if not with_grad:
        return cost

    def vjp(upstream: np.ndarray) -> np.ndarray:
        g = np.asarray(upstream, dtype=np.float64)
        row = g.sum(axis=1)
        col = g.sum(axis=0)
        d_emb_x = 2.0 * (row[:, None] * emb_x - g @ emb_y)
        d_emb_y = 2.0 * (col[:, None] * emb_y - g.T @ emb_x)
        grads_x = _tower_backward(model.tower_src, cache_x, d_emb_x)
        grads_y = _tower_backward(model.tower_dst, cache_y, d_emb_y)
        parts = []
        for grads in (grads_x, grads_y):
            for gw, gb in grads:
                parts.append(gw.ravel())
                parts.append(gb.ravel())
        return np.concatenate(parts)

    return cost, vjp


def psd_project(a: np.ndarray) -> np.ndarray:
    """Frobenius-nearest PSD matrix: clamp negative eigenvalues to 0.

    The input is symmetrized first; the output is re-symmetrized to
    remove reconstruction rounding.  Idempotent on the PSD cone.
    """
    s = (np.asarray(a, dtype=np.float64) + np.asarray(a, dtype=np.float64).T) / 2.0
    vals, vecs = np.linalg.eigh(s)
    out = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return (out + out.T) / 2.0


# ---------------------------------------------------------------------------
# differentiable inner solver
# ---------------------------------------------------------------------------




def _inner_burn_in(logk: np.ndarray, tol: float, max_iter: int, lv0: np.ndarray,
                   min_iter: int = 1):
    """Run scaling updates in log space, keeping the column-dual history.

    Returns (history of lv including the start state, iterations run,
    converged flag, final marginal residual).  At least ``min_iter``
    iterations always run so a gradient can flow through the unrolled
    tail; extra post-tolerance updates only tighten the fixed point.
    """
    n, m = logk.shape
    log_a, log_b = -np.log(n), -np.log(m)
    lv = lv0
    history = [lv0]
    converged = False
    res = np.inf
    for it in range(1, max_iter + 1):
        lu = log_a - logsumexp(logk + lv[None, :], axis=1)
        lv = log_b - logsumexp(logk + lu[:, None], axis=0)
        history.append(lv)
        plan = np.exp(lu[:, None] + logk + lv[None, :])
        n_, m_ = plan.shape
        res = max(np.abs(plan.sum(axis=1) - 1.0 / n_).max(),
                  np.abs(plan.sum(axis=0) - 1.0 / m_).max())
        if res <= tol:
            converged = True
            if it >= min_iter:
                break
    return history, len(history) - 1, converged, float(res)


def _unroll_forward(logk: np.ndarray, lv_start: np.ndarray, steps: int):
    """Re-run ``steps`` scaling updates, caching what backward needs."""
    n, m = logk.shape
    log_a, log_b = -np.log(n), -np.log(m)
    lv = lv_start
    cache = []
    lu = None
    for _ in range(steps):
        lv_prev = lv
        row_lse = logsumexp(logk + lv[None, :], axis=1)
        lu = log_a - row_lse
        col_lse = logsumexp(logk + lu[:, None], axis=0)
        lv = log_b - col_lse
        cache.append((lv_prev, row_lse, lu, col_lse))
    plan = np.exp(lu[:, None] + logk + lv[None, :])
    return plan, lv, cache


def _unroll_backward(logk: np.ndarray, plan: np.ndarray, cache, upstream: np.ndarray) -> np.ndarray:
    """Reverse accumulation of d(sum(upstream * plan))/d(logk).

    The start state of the unroll is treated as a constant; the chain
    walks the cached updates backwards, propagating through each
    log-sum-exp as a softmax weighting.
    """
    w = upstream * plan
    g_lu = w.sum(axis=1)
    g_lv = w.sum(axis=0)
    g_logk = w.copy()
    for lv_prev, row_lse, lu, col_lse in reversed(cache):
        # lv = log_b - col_lse(logk + lu): softmax over rows
        soft_col = np.exp(logk + lu[:, None] - col_lse[None, :])
        d_col = soft_col * (-g_lv)[None, :]
        g_logk += d_col
        g_lu = g_lu + d_col.sum(axis=1)
        # lu = log_a - row_lse(logk + lv_prev): softmax over columns
        soft_row = np.exp(logk + lv_prev[None, :] - row_lse[:, None])
        d_row = soft_row * (-g_lu)[:, None]
        g_logk += d_row
        g_lv = d_row.sum(axis=0)
        g_lu = np.zeros_like(g_lu)
    return g_logk


# ---------------------------------------------------------------------------
# bilevel objective and training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BilevelConfig:
    """Outer-loop settings for cost learning.

    ``tradeoff`` is the weight lambda: the discrepancy to the base cost
    enters the objective with weight 1/lambda, so large values free the
    cost to chase fairness.  The inner entropic solves use ``inner``
    (warm-started across outer steps) and gradients flow through at
    most ``unroll_length`` of the final inner updates.
    """

    tradeoff: float
    inner: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(epsilon=1.0, tol=1e-6, max_iter=1000))
    outer_steps: int = 400
    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    stabilizer: float = 1e-8
    unroll_length: int = 200

    def __post_init__(self):
        if self.tradeoff <= 0:
            raise ValueError(f"tradeoff must be positive, got {self.tradeoff}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        for name in ("outer_steps", "beta1", "beta2", "stabilizer", "unroll_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def epsilon(self) -> float:
        return self.inner.epsilon


class _Adam:
    """Adam moments over a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float, beta2: float, stabilizer: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.stabilizer = stabilizer
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.stabilizer)


def _tangent_filter(grad: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Drop the gradient component the PSD projection would undo.

    On the cone boundary, a descent step along a zero eigenvalue's
    outward normal is clamped right back by psd_project, yet its
    magnitude would still feed Adam's second moments and throttle every
    other direction.  Filtering keeps the moments meaningful: in the
    eigenbasis of the current matrix, diagonal entries of the gradient
    that push a (near-)zero eigenvalue negative are zeroed.
    """
    vals, vecs = np.linalg.eigh(matrix)
    g_eig = vecs.T @ grad @ vecs
    blocked = (vals <= 1e-12) & (np.diag(g_eig) > 0.0)
    if not blocked.any():
        return grad
    g_eig[np.diag_indices_from(g_eig)] = np.where(blocked, 0.0, np.diag(g_eig))
    out = vecs @ g_eig @ vecs.T
    return (out + out.T) / 2.0


def _model_cost_and_vjp(model, x, y):
    if isinstance(model, MahalanobisModel):
        cost = mahalanobis_cost(model, x, y)
        return cost.values, lambda g: _mahalanobis_vjp(g, x, y).ravel()
    cost, vjp = mlp_cost(model, x, y, with_grad=True)
    return cost.values, vjp


@dataclass(frozen=True)
class BilevelEval:
    """One evaluation of the outer objective at fixed parameters."""

    value: float
    gradient: np.ndarray
    fairness: float
    discrepancy: float
    inner_iterations: int
    inner_converged: bool
    duals: np.ndarray          # final column log-scalings, for warm starts


def bilevel_objective(model, src: LabeledDataset, dst: LabeledDataset, target,
                      cfg: BilevelConfig, warm_duals: np.ndarray | None = None) -> BilevelEval:
    """Evaluate fairness-of-the-inner-plan plus anchored discrepancy.

    The inner entropic problem is solved to ``cfg.inner`` tolerance
    (warm-started from ``warm_duals`` when given); the parameter
    gradient runs back through the last min(unroll_length, iterations
    actually run) scaling updates, with the unroll-boundary duals held
    constant, and is then composed with the cost family's own gradient.
    Inner non-convergence is flagged, not raised; the gradient is still
    returned.
    """
    fmat = _target_matrix(target)
    eps = cfg.epsilon
    cvals, cost_vjp = _model_cost_and_vjp(model, src, dst)
    base = squared_euclidean_cost(src, dst).values
    logk = -cvals / eps - 1.0
    lv0 = np.zeros(dst.n) if warm_duals is None else np.asarray(warm_duals, dtype=np.float64)
    history, ran, converged, _ = _inner_burn_in(logk, cfg.inner.tol, cfg.inner.max_iter, lv0)
    steps = min(cfg.unroll_length, ran)
    plan, lv_final, cache = _unroll_forward(logk, history[ran - steps], steps)

    fl = fairness_loss(plan, fmat, src.labels, dst.labels)
    g_plan = fairness_loss_grad(plan, fmat, src.labels, dst.labels)
    g_logk = _unroll_backward(logk, plan, cache, g_plan)
    g_cost = g_logk * (-1.0 / eps)

    # discrepancy under the uniform pair measure: the per-entry mean keeps
    # the tradeoff weight meaningful across sample sizes
    disc = float(((cvals - base) ** 2).mean())
    value = fl + disc / cfg.tradeoff
    g_cost = g_cost + (2.0 / (cfg.tradeoff * cvals.size)) * (cvals - base)
    grad = cost_vjp(g_cost)
    return BilevelEval(value, grad, fl, disc, ran, converged, lv_final)


@dataclass(frozen=True)
class TrainingHistory:
    """Per-step objective decomposition; row 0 is the initial model and
    the final row is the returned model."""

    rows: tuple[tuple[int, float, float, float], ...]  # (step, fairness, discrepancy, objective)
    diverged: bool = False

    def to_dicts(self) -> list[dict]:
        return [
            {"step": s, "fairness_loss": f, "discrepancy": d, "objective": o}
            for s, f, d, o in self.rows
        ]


def train_cost(model, src: LabeledDataset, dst: LabeledDataset, target,
               cfg: BilevelConfig, seed: int = 0):
    """Adam training of a cost family against the bilevel objective.

    One optimizer step per inner solve, inner duals warm-started across
    steps, and a PSD projection after every Mahalanobis update.  Stops
    early (with the history flagged) if the objective diverges past 1e6
    or turns non-finite.  Training is deterministic; ``seed`` only
    labels the run.

    Returns (trained model, TrainingHistory).
    """
    del seed  # deterministic full-batch loop; kept for call-site symmetry
    is_mahalanobis = isinstance(model, MahalanobisModel)
    frozen = cfg.learning_rate == 0.0
    params = model.to_vector()
    adam = _Adam(params.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.stabilizer)
    rows = []
    warm = None
    for step in range(cfg.outer_steps):
        ev = bilevel_objective(model, src, dst, target, cfg, warm_duals=warm)
        rows.append((step, ev.fairness, ev.discrepancy, ev.value))
        if not np.isfinite(ev.value) or ev.value > 1e6:
            return model, TrainingHistory(tuple(rows), diverged=True)
        if frozen:
            # A zero learning rate evaluates without moving: the model and
            # every recorded objective stay bit-identical, so the loop keeps
            # cold starts to avoid warm-start drift in the trace.
            continue
        grad = ev.gradient
        if is_mahalanobis:
            grad = _tangent_filter(grad.reshape(model.dim, model.dim), model.matrix).ravel()
        params = adam.step(params, grad)
        if is_mahalanobis:
            model = MahalanobisModel(psd_project(params.reshape(model.dim, model.dim)))
            params = model.to_vector()
        else:
            model = model.from_vector(params)
        warm = ev.duals
    final = bilevel_objective(model, src, dst, target, cfg, warm_duals=warm)
    rows.append((cfg.outer_steps, final.fairness, final.discrepancy, final.value))
    diverged = not np.isfinite(final.value) or final.value > 1e6
    return model, TrainingHistory(tuple(rows), diverged=diverged)


def pretrain_mlp(model: MlpModel, src: LabeledDataset, dst: LabeledDataset,
                 steps: int = 500, learning_rate: float = 1e-2,
                 rel_tol: float = 1e-2) -> MlpModel:
    """Fit the towers to the base cost before bilevel training.

    Minimizes the squared Frobenius distance between the model cost and
    the squared Euclidean cost on the training sample, stopping once
    the relative Frobenius gap drops below ``rel_tol``.
    """
    base = squared_euclidean_cost(src, dst).values
    base_norm = np.linalg.norm(base)
    params = model.to_vector()
    adam = _Adam(params.size, learning_rate, 0.9, 0.999, 1e-8)
    for _ in range(steps):
        cost, vjp = mlp_cost(model, src, dst, with_grad=True)
        gap = np.linalg.norm(cost.values - base) / max(base_norm, 1e-300)
        if gap < rel_tol:
            break
        params = adam.step(params, vjp(2.0 * (cost.values - base)))
        model = model.from_vector(params)
    return model


def match_with_learned_cost(model, src: LabeledDataset, dst: LabeledDataset, target,
                            cfg: BilevelConfig) -> tuple:
    """Vanilla entropic matching of new samples under a trained cost.

    No retraining happens here: the learned cost is evaluated on the
    fresh datasets and a plain entropic solve produces the plan.  The
    report carries the fairness loss against the training target.
    """
    cvals, _ = _model_cost_and_vjp(model, src, dst)
    plan, pots, rep = sinkhorn(cvals, replace(cfg.inner, warm_start=None))
    fl = fairness_loss(plan, _target_matrix(target), src.labels, dst.labels)
    report = SolverReport(
        converged=rep.converged,
        iterations=rep.iterations,
        final_residual=rep.final_residual,
        objective=rep.objective,
        transport_cost=rep.transport_cost,
        fairness_loss=fl,
        wall_time_seconds=rep.wall_time_seconds,
    )
    return plan, report


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_model(model, path) -> None:
    """Write a cost model to JSON (matrices row-major, with shapes)."""
    if isinstance(model, MahalanobisModel):
        payload = {"kind": "mahalanobis", "dim": model.dim,
                   "matrix": model.matrix.tolist()}
    elif isinstance(model, MlpModel):
        payload = {
            "kind": "mlp", "dim": model.dim, "hidden": model.hidden,
            "out_dim": model.out_dim,
            "tower_src": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in model.tower_src],
            "tower_dst": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in model.tower_dst],
        }
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def load_model(path):
    with open(path) as fh:
        payload = json.load(fh)
    kind = payload.get("kind")
    if kind == "mahalanobis":
        return MahalanobisModel(np.array(payload["matrix"]))
    if kind == "mlp":
        towers = [
            tuple((np.array(layer["weight"]), np.array(layer["bias"])) for layer in payload[key])
            for key in ("tower_src", "tower_dst")
        ]
        return MlpModel(payload["dim"], payload["hidden"], payload["out_dim"], towers[0], towers[1])
    raise ValueError(f"unknown model kind {kind!r}")
