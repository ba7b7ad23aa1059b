"""Tests for the fairness-penalized generalized conditional gradient solver."""

import numpy as np
import pytest

from fairot.domain import (
    LabeledDataset,
    entropy_term,
    group_coupling,
    squared_euclidean_cost,
    transport_cost,
)
from fairot.fairness import fairness_loss, product_fair_plan, target_from_quota
from fairot.penalized import (
    GcgConfig,
    GcgIterate,
    armijo_step,
    penalized_gcg,
    penalized_objective,
    trace_to_rows,
)
from fairot.sinkhorn import SinkhornConfig, fair_sinkhorn, sinkhorn

TIGHT = SinkhornConfig(epsilon=1.0, tol=1e-9, max_iter=100_000)


def make_instance(rng, src_labels, dst_labels, scale=1.0):
    """Random labeled sides and their squared-distance cost."""
    src = LabeledDataset(rng.normal(scale=scale, size=(len(src_labels), 2)), src_labels)
    dst = LabeledDataset(rng.normal(scale=scale, size=(len(dst_labels), 2)), dst_labels)
    return src, dst, squared_euclidean_cost(src, dst)


def quota_target(src, dst, quota):
    """Feasible two-group target for the empirical marginals."""
    return target_from_quota(src.group_marginal, dst.group_marginal, quota)


def random_feasible_plan(rng, n, m, sweeps=300):
    """Strictly positive plan with near-uniform marginals via IPF."""
    vals = rng.random((n, m)) + 0.05
    for _ in range(sweeps):
        vals *= (1.0 / n) / vals.sum(axis=1, keepdims=True)
        vals *= (1.0 / m) / vals.sum(axis=0, keepdims=True)
    return vals


class TestGcgConfig:
    def test_defaults(self):
        cfg = GcgConfig(penalty=3.0)
        assert cfg.num_iter_max == 2000
        assert cfg.num_inner_iter_max == 200
        assert cfg.stop_thr == 1e-9
        assert cfg.stop_thr2 == 1e-9

    def test_zero_penalty_allowed(self):
        assert GcgConfig(penalty=0.0).penalty == 0.0

    def test_negative_penalty_rejected(self):
        with pytest.raises(ValueError, match="penalty"):
            GcgConfig(penalty=-0.5)

    def test_nonpositive_thresholds_rejected(self):
        with pytest.raises(ValueError, match="thresholds"):
            GcgConfig(penalty=1.0, stop_thr=0.0)
        with pytest.raises(ValueError, match="thresholds"):
            GcgConfig(penalty=1.0, stop_thr2=-1e-9)

    def test_iteration_limits_rejected(self):
        with pytest.raises(ValueError, match="iteration limits"):
            GcgConfig(penalty=1.0, num_iter_max=0)
        with pytest.raises(ValueError, match="iteration limits"):
            GcgConfig(penalty=1.0, num_inner_iter_max=0)


class TestPenalizedObjective:
    def test_matches_term_sum(self):
        rng = np.random.default_rng(3)
        plan = random_feasible_plan(rng, 4, 5)
        cost = rng.random((4, 5))
        target = np.array([[0.3, 0.2], [0.1, 0.4]])
        src, dst = (1, 1, 2, 2), (1, 2, 2, 1, 2)
        want = (transport_cost(plan, cost)
                + 0.7 * entropy_term(plan)
                + 2.5 * fairness_loss(plan, target, src, dst))
        got = penalized_objective(plan, cost, 0.7, 2.5, target, src, dst)
        np.testing.assert_allclose(got, want, rtol=0, atol=0)

    def test_zero_penalty_drops_fairness(self):
        rng = np.random.default_rng(4)
        plan = random_feasible_plan(rng, 3, 3)
        cost = rng.random((3, 3))
        target = np.array([[1.0, 0.0], [0.0, 0.0]])  # wildly off, must not matter
        got = penalized_objective(plan, cost, 1.3, 0.0, target, (1, 1, 2), (1, 2, 2))
        want = transport_cost(plan, cost) + 1.3 * entropy_term(plan)
        np.testing.assert_allclose(got, want, rtol=0, atol=0)


class TestArmijoStep:
    def test_direction_equal_current_takes_full_step(self):
        current = np.array([0.3, 0.7])

        def objective(p):
            return float((p ** 2).sum())

        alpha, value = armijo_step(objective, current, current.copy(), slope=0.0)
        assert alpha == 1.0
        assert value == objective(current)

    def test_backtracks_past_an_overshoot(self):
        # minimum at 0.9; the full step to 0.8 gives no sufficient decrease,
        # one halving lands exactly on the minimizer
        def objective(p):
            return float(((p - 0.9) ** 2).sum())

        current = np.array([1.0])
        direction = np.array([0.8])
        slope = 2.0 * (1.0 - 0.9) * (0.8 - 1.0)
        alpha, value = armijo_step(objective, current, direction, slope)
        assert alpha == 0.5
        assert value == pytest.approx(0.0, abs=1e-15)

    def test_exhausted_backtracking_warns_and_returns_minimum_step(self):
        def objective(p):
            return 2.0

        current = np.array([0.5])
        with pytest.warns(UserWarning, match="no Armijo step"):
            alpha, value = armijo_step(objective, current, np.array([0.0]), slope=-1.0)
        assert alpha == pytest.approx(0.5 ** 30)
        assert value == 2.0

    def test_custom_beta_and_kmax(self):
        def objective(p):
            return 1.0

        with pytest.warns(UserWarning, match="no Armijo step"):
            alpha, _ = armijo_step(objective, np.array([0.0]), np.array([1.0]),
                                   slope=-1.0, beta=0.1, kmax=3)
        assert alpha == pytest.approx(1e-3)

    def test_infinite_slope_accepts_plain_descent(self):
        def objective(p):
            return float(p.sum())

        alpha, value = armijo_step(objective, np.array([1.0]), np.array([0.0]),
                                   slope=-np.inf)
        assert alpha == 1.0
        assert value == 0.0

    def test_infinite_slope_still_requires_descent(self):
        def objective(p):
            return float(p.sum())

        with pytest.warns(UserWarning, match="no Armijo step"):
            alpha, _ = armijo_step(objective, np.array([1.0]), np.array([2.0]),
                                   slope=-np.inf)
        assert alpha == pytest.approx(0.5 ** 30)

    def test_non_finite_trial_values_are_skipped(self):
        def objective(p):
            total = float(p.sum())
            return np.inf if total > 0.6 else -total

        alpha, value = armijo_step(objective, np.zeros(1), np.ones(1), slope=-np.inf)
        assert alpha == 0.5
        assert value == -0.5


class TestPenalizedGcg:
    def test_zero_penalty_recovers_vanilla_plan(self):
        rng = np.random.default_rng(10)
        src, dst, cost = make_instance(rng, (1, 1, 2, 2, 2), (1, 2, 1, 2, 2))
        target = quota_target(src, dst, 0.5)
        plan, report, _ = penalized_gcg(cost, target, src.labels, dst.labels,
                                        GcgConfig(penalty=0.0, sinkhorn=TIGHT))
        vanilla, _, _ = sinkhorn(cost, TIGHT)
        assert report.converged
        np.testing.assert_allclose(plan.values, vanilla.values, atol=1e-8)

    def test_huge_penalty_matches_fair_sinkhorn(self):
        # the conditional-gradient tail zigzags between coupling vertices, so
        # the reachable accuracy depends on how sharply the plan responds to
        # the residual coupling error; compact features keep that response
        # mild enough for the iterate to close in on the hard-constrained plan
        rng = np.random.default_rng(11)
        src, dst, cost = make_instance(rng, (1, 1, 1, 2, 2), (1, 1, 2, 2, 2), scale=0.3)
        target = quota_target(src, dst, 0.5)
        vanilla, _, _ = sinkhorn(cost, TIGHT)
        assert fairness_loss(vanilla, target, src.labels, dst.labels) > 1e-2
        plan, report, _ = penalized_gcg(cost, target, src.labels, dst.labels,
                                        GcgConfig(penalty=1e6, sinkhorn=TIGHT))
        fair_plan, _, fair_rep = fair_sinkhorn(cost, target, src.labels, dst.labels, TIGHT)
        assert fair_rep.converged
        assert report.fairness_loss <= fair_rep.fairness_loss + 1e-4
        gap = float(np.linalg.norm(plan.values - fair_plan.values))
        assert gap <= 1e-2

    def test_objective_beats_reference_plans(self):
        rng = np.random.default_rng(12)
        src, dst, cost = make_instance(rng, (1, 1, 1, 2, 2), (1, 1, 2, 2, 2))
        target = quota_target(src, dst, 0.5)
        cfg = GcgConfig(penalty=10.0, sinkhorn=TIGHT)
        _, report, _ = penalized_gcg(cost, target, src.labels, dst.labels, cfg)
        vanilla, _, _ = sinkhorn(cost, TIGHT)
        witness = product_fair_plan(src, dst, target)
        competitors = [
            penalized_objective(vanilla, cost, 1.0, 10.0, target, src.labels, dst.labels),
            penalized_objective(witness, cost, 1.0, 10.0, target, src.labels, dst.labels),
        ]
        assert report.objective <= min(competitors) + cfg.stop_thr2

    def test_trace_and_report_are_consistent(self):
        rng = np.random.default_rng(13)
        src, dst, cost = make_instance(rng, (1, 2, 1, 2), (2, 1, 2, 1))
        target = quota_target(src, dst, 0.4)
        plan, report, trace = penalized_gcg(cost, target, src.labels, dst.labels,
                                            GcgConfig(penalty=5.0, sinkhorn=TIGHT))
        assert trace[0].iteration == 0
        assert trace[0].alpha == 0.0
        assert [r.iteration for r in trace] == list(range(len(trace)))
        assert report.iterations >= trace[-1].iteration
        assert report.objective == trace[-1].objective
        np.testing.assert_allclose(report.transport_cost,
                                   transport_cost(plan, cost), rtol=1e-12)
        np.testing.assert_allclose(
            report.fairness_loss,
            fairness_loss(plan, target, src.labels, dst.labels), rtol=1e-12)
        np.testing.assert_allclose(
            report.objective,
            penalized_objective(plan, cost, 1.0, 5.0, target, src.labels, dst.labels),
            rtol=1e-12)

    def test_objective_descends_monotonically(self):
        rng = np.random.default_rng(14)
        src, dst, cost = make_instance(rng, (1, 1, 2, 2, 2, 1), (1, 2, 2, 1, 2, 2))
        target = quota_target(src, dst, 0.6)
        _, _, trace = penalized_gcg(cost, target, src.labels, dst.labels,
                                    GcgConfig(penalty=40.0, sinkhorn=TIGHT))
        objectives = np.array([r.objective for r in trace])
        assert np.all(np.diff(objectives) <= 1e-12)

    def test_result_stays_feasible(self):
        rng = np.random.default_rng(15)
        src, dst, cost = make_instance(rng, (1, 1, 1, 2, 2), (2, 2, 1, 1, 2))
        target = quota_target(src, dst, 0.5)
        plan, _, _ = penalized_gcg(cost, target, src.labels, dst.labels,
                                   GcgConfig(penalty=25.0, sinkhorn=TIGHT))
        n, m = plan.values.shape
        np.testing.assert_allclose(plan.values.sum(axis=1), np.full(n, 1.0 / n), atol=1e-8)
        np.testing.assert_allclose(plan.values.sum(axis=0), np.full(m, 1.0 / m), atol=1e-8)
        assert np.all(plan.values >= 0.0)

    def test_penalty_sweep_trades_cost_for_fairness(self):
        rng = np.random.default_rng(16)
        src, dst, cost = make_instance(rng, (1, 1, 1, 2, 2, 2), (1, 1, 2, 2, 2, 2))
        target = quota_target(src, dst, 0.5)
        losses, costs = [], []
        for penalty in (0.0, 0.5, 5.0, 50.0, 500.0):
            _, report, _ = penalized_gcg(cost, target, src.labels, dst.labels,
                                         GcgConfig(penalty=penalty, sinkhorn=TIGHT))
            assert report.converged
            losses.append(report.fairness_loss)
            costs.append(report.transport_cost)
        for a, b in zip(losses, losses[1:]):
            assert b <= a + 1e-6
        for a, b in zip(costs, costs[1:]):
            assert b >= a - 1e-6

    def test_result_beats_random_feasible_plans(self):
        rng = np.random.default_rng(17)
        src, dst, cost = make_instance(rng, (1, 1, 2, 2), (1, 2, 1, 2))
        target = quota_target(src, dst, 0.5)
        _, report, _ = penalized_gcg(cost, target, src.labels, dst.labels,
                                     GcgConfig(penalty=5.0, sinkhorn=TIGHT))
        for _ in range(50):
            candidate = random_feasible_plan(rng, 4, 4)
            value = penalized_objective(candidate, cost, 1.0, 5.0, target,
                                        src.labels, dst.labels)
            assert report.objective <= value + 1e-8

    def test_target_already_met_keeps_vanilla_plan(self):
        rng = np.random.default_rng(18)
        src, dst, cost = make_instance(rng, (1, 1, 2, 2, 2), (1, 2, 1, 2, 2))
        vanilla, _, _ = sinkhorn(cost, TIGHT)
        target = group_coupling(vanilla.values, src.labels, dst.labels)
        plan, report, _ = penalized_gcg(cost, target, src.labels, dst.labels,
                                        GcgConfig(penalty=50.0, sinkhorn=TIGHT))
        assert report.converged
        np.testing.assert_allclose(plan.values, vanilla.values, atol=1e-6)

    def test_iteration_cap_flags_unconverged(self):
        rng = np.random.default_rng(19)
        src, dst, cost = make_instance(rng, (1, 1, 1, 2, 2), (1, 1, 2, 2, 2))
        target = quota_target(src, dst, 0.4)
        _, report, trace = penalized_gcg(cost, target, src.labels, dst.labels,
                                         GcgConfig(penalty=100.0, num_iter_max=1,
                                                   sinkhorn=TIGHT))
        assert not report.converged
        assert report.iterations == 1
        assert len(trace) == 2

    def test_unconverged_initial_solve_warns(self):
        rng = np.random.default_rng(20)
        src, dst, cost = make_instance(rng, (1, 2, 1, 2), (1, 2, 2, 1))
        target = quota_target(src, dst, 0.5)
        loose = SinkhornConfig(epsilon=1.0, tol=1e-9, max_iter=1)
        with pytest.warns(UserWarning, match="initial entropic solve"):
            penalized_gcg(cost, target, src.labels, dst.labels,
                          GcgConfig(penalty=1.0, num_iter_max=2, sinkhorn=loose))


class TestTraceRows:
    def test_rows_follow_column_order(self):
        trace = [GcgIterate(0, 1.0, 0.5, 0.25, 0.0),
                 GcgIterate(1, 0.9, 0.55, 0.15, 0.75)]
        rows = trace_to_rows(trace)
        assert len(rows) == 2
        assert list(rows[0]) == ["iter", "objective", "transport_cost",
                                 "fairness_loss", "alpha"]
        assert rows[1] == {"iter": 1, "objective": 0.9, "transport_cost": 0.55,
                           "fairness_loss": 0.15, "alpha": 0.75}

    def test_empty_trace(self):
        assert trace_to_rows([]) == []
