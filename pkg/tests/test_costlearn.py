"""Tests for the bilevel cost-learning module."""

import numpy as np
import pytest

from fairot.costlearn import (
    BilevelConfig,
    MahalanobisModel,
    MlpModel,
    bilevel_objective,
    load_model,
    mahalanobis_cost,
    match_with_learned_cost,
    mlp_cost,
    pretrain_mlp,
    psd_project,
    save_model,
    train_cost,
)
from fairot.domain import LabeledDataset, group_coupling, squared_euclidean_cost
from fairot.fairness import fairness_loss, target_from_quota
from fairot.oracle import finite_diff
from fairot.sinkhorn import SinkhornConfig, sinkhorn

TIGHT_INNER = SinkhornConfig(epsilon=1.0, tol=1e-12, max_iter=5000)


def random_psd(rng, dim, ridge=0.5):
    a = rng.normal(size=(dim, dim))
    return a @ a.T + ridge * np.eye(dim)


def make_sides(rng, src_labels, dst_labels, scale=1.0):
    src = LabeledDataset(rng.normal(scale=scale, size=(len(src_labels), 2)), src_labels)
    dst = LabeledDataset(rng.normal(scale=scale, size=(len(dst_labels), 2)), dst_labels)
    return src, dst


def linear_identity_tower():
    """Towers that pass the first two coordinates through untouched."""
    w1 = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    w2 = np.zeros((4, 4))
    w2[0, 0] = w2[1, 1] = 1.0
    w3 = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    return ((w1, np.zeros(4)), (w2, np.zeros(4)), (w3, np.zeros(2)))


class TestMahalanobisModel:
    def test_identity(self):
        np.testing.assert_array_equal(MahalanobisModel.identity(3).matrix, np.eye(3))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            MahalanobisModel(np.ones((2, 3)))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            MahalanobisModel(np.array([[1.0, 0.1], [0.0, 1.0]]))

    def test_indefinite_rejected(self):
        with pytest.raises(ValueError, match="positive semidefinite"):
            MahalanobisModel(np.diag([1.0, -1.0]))

    def test_tiny_negative_eigenvalue_tolerated(self):
        model = MahalanobisModel(np.array([[-5e-11]]))
        assert model.dim == 1

    def test_vector_round_trip(self):
        rng = np.random.default_rng(0)
        m = random_psd(rng, 3)
        model = MahalanobisModel(m)
        again = MahalanobisModel.from_vector(3, model.to_vector())
        np.testing.assert_array_equal(again.matrix, m)


class TestMahalanobisCost:
    def test_identity_matches_squared_euclidean(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        got = mahalanobis_cost(MahalanobisModel.identity(3), x, y)
        want = squared_euclidean_cost(x, y)
        np.testing.assert_allclose(got.values, want.values, atol=1e-12)

    def test_zero_matrix_gives_zero_cost(self):
        rng = np.random.default_rng(2)
        cost = mahalanobis_cost(MahalanobisModel(np.zeros((2, 2))),
                                rng.normal(size=(3, 2)), rng.normal(size=(4, 2)))
        np.testing.assert_array_equal(cost.values, np.zeros((3, 4)))

    def test_entries_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = random_psd(rng, 3, ridge=0.0)
            cost = mahalanobis_cost(MahalanobisModel(m),
                                    rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
            assert cost.values.min() >= 0.0

    def test_doubling_matrix_doubles_cost_exactly(self):
        rng = np.random.default_rng(4)
        m = random_psd(rng, 2)
        x, y = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        one = mahalanobis_cost(MahalanobisModel(m), x, y).values
        two = mahalanobis_cost(MahalanobisModel(2.0 * m), x, y).values
        np.testing.assert_array_equal(two, 2.0 * one)

    def test_gradient_is_outer_product(self):
        rng = np.random.default_rng(5)
        m = random_psd(rng, 2)
        x, y = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
        _, grad = mahalanobis_cost(MahalanobisModel(m), x, y, with_grad=True)
        for i in range(3):
            for j in range(4):
                diff = x[i] - y[j]
                np.testing.assert_allclose(grad[i, j], np.outer(diff, diff), atol=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        m = random_psd(rng, 3)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        upstream = rng.normal(size=(4, 5))
        _, grad = mahalanobis_cost(MahalanobisModel(m), x, y, with_grad=True)
        analytic = np.einsum("ij,ijkl->kl", upstream, grad)

        def weighted(mat):
            return float((upstream * mahalanobis_cost(mat, x, y).values).sum())

        numeric = finite_diff(weighted, m, step=1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_non_psd_matrix_rejected(self):
        with pytest.raises(ValueError, match="PSD"):
            mahalanobis_cost(np.diag([1.0, -1.0]), np.zeros((2, 2)), np.zeros((2, 2)))


class TestMlpModel:
    def test_init_shapes(self):
        model = MlpModel.init(3, hidden=4, out_dim=2, seed=0)
        shapes = [(w.shape, b.shape) for w, b in model.tower_src]
        assert shapes == [((4, 3), (4,)), ((4, 4), (4,)), ((2, 4), (2,))]
        assert model.tower_src[0][0].shape == model.tower_dst[0][0].shape

    def test_default_hidden_width(self):
        assert MlpModel.init(2).hidden == 32

    def test_wrong_layer_count_rejected(self):
        tower = linear_identity_tower()
        with pytest.raises(ValueError, match="3 layers"):
            MlpModel(2, 4, 2, tower[:2], tower)

    def test_shape_chain_rejected(self):
        good = linear_identity_tower()
        bad = (good[0], (np.zeros((3, 4)), np.zeros(3)), good[2])
        with pytest.raises(ValueError, match="chain"):
            MlpModel(2, 4, 2, bad, good)

    def test_non_finite_rejected(self):
        bad = linear_identity_tower()
        poisoned = ((bad[0][0] * np.inf, bad[0][1]), bad[1], bad[2])
        with pytest.raises(ValueError, match="non-finite"):
            MlpModel(2, 4, 2, poisoned, bad)

    def test_vector_round_trip(self):
        model = MlpModel.init(3, hidden=4, seed=7)
        vec = model.to_vector()
        assert vec.size == 2 * ((4 * 3 + 4) + (4 * 4 + 4) + (2 * 4 + 2))
        again = model.from_vector(vec)
        for t1, t2 in ((again.tower_src, model.tower_src), (again.tower_dst, model.tower_dst)):
            for (w1, b1), (w2, b2) in zip(t1, t2):
                np.testing.assert_array_equal(w1, w2)
                np.testing.assert_array_equal(b1, b2)

    def test_wrong_vector_length_rejected(self):
        model = MlpModel.init(2, hidden=4, seed=0)
        with pytest.raises(ValueError, match="parameter count"):
            model.from_vector(model.to_vector()[:-1])


class TestMlpCost:
    def test_all_zero_parameters_give_zero_cost(self):
        rng = np.random.default_rng(8)
        base = MlpModel.init(2, hidden=4, seed=0)
        model = base.from_vector(np.zeros(base.to_vector().size))
        cost = mlp_cost(model, rng.normal(size=(3, 2)), rng.normal(size=(4, 2)))
        np.testing.assert_array_equal(cost.values, np.zeros((3, 4)))

    def test_linear_identity_towers_reproduce_squared_distances(self):
        tower = linear_identity_tower()
        model = MlpModel(2, 4, 2, tower, tower)
        rng = np.random.default_rng(9)
        pts = rng.uniform(0.2, 2.0, size=(5, 2))  # positive: ReLU stays active
        cost = mlp_cost(model, pts, pts)
        np.testing.assert_allclose(np.diag(cost.values), np.zeros(5), atol=1e-15)
        want = squared_euclidean_cost(pts, pts)
        np.testing.assert_allclose(cost.values, want.values, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        model = MlpModel.init(2, hidden=4, seed=0)
        with pytest.raises(ValueError, match="expects dimension"):
            mlp_cost(model, np.zeros((3, 3)), np.zeros((4, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        model = MlpModel.init(2, hidden=4, seed=5)
        x, y = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
        upstream = rng.normal(size=(3, 4))
        _, vjp = mlp_cost(model, x, y, with_grad=True)
        analytic = vjp(upstream)

        def weighted(vec):
            return float((upstream * mlp_cost(model.from_vector(vec), x, y).values).sum())

        numeric = finite_diff(weighted, model.to_vector(), step=1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    def test_relu_derivative_zero_at_kink(self):
        tower = linear_identity_tower()
        model = MlpModel(2, 4, 2, tower, tower)
        x = np.array([[0.0, 0.5]])  # first hidden preactivation exactly 0
        y = np.array([[0.3, 0.4]])
        _, vjp = mlp_cost(model, x, y, with_grad=True)
        grad = vjp(np.ones((1, 1)))
        # first row of the source tower's first weight matrix fed the dead unit
        np.testing.assert_array_equal(grad[0:2], np.zeros(2))


class TestPsdProject:
    def test_psd_input_unchanged(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            m = random_psd(rng, 3, ridge=0.1)
            np.testing.assert_allclose(psd_project(m), m, atol=1e-12)

    def test_clamps_negative_eigenvalue(self):
        np.testing.assert_allclose(psd_project(np.diag([1.0, -1.0])),
                                   np.diag([1.0, 0.0]), atol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            a = rng.normal(size=(4, 4))
            a = a + a.T
            once = psd_project(a)
            np.testing.assert_allclose(psd_project(once), once, atol=1e-12)

    def test_symmetrizes_input(self):
        rng = np.random.default_rng(13)
        a = rng.normal(size=(3, 3))
        np.testing.assert_allclose(psd_project(a), psd_project((a + a.T) / 2.0), atol=1e-13)

    def test_frobenius_nearest_among_sampled_candidates(self):
        rng = np.random.default_rng(14)
        a = rng.normal(size=(3, 3))
        a = a + a.T
        projected = psd_project(a)
        best = np.linalg.norm(a - projected)
        roots = rng.normal(size=(10_000, 3, 3)) * rng.uniform(0.2, 1.5, size=(10_000, 1, 1))
        candidates = roots @ roots.transpose(0, 2, 1)
        gaps = np.linalg.norm(candidates - a, axis=(1, 2))
        assert best <= gaps.min() + 1e-12


class TestBilevelConfig:
    def test_defaults(self):
        cfg = BilevelConfig(tradeoff=100.0)
        assert cfg.inner.tol == 1e-6
        assert cfg.inner.max_iter == 1000
        assert cfg.outer_steps == 400
        assert cfg.unroll_length == 200
        assert cfg.epsilon == cfg.inner.epsilon

    def test_nonpositive_tradeoff_rejected(self):
        for bad in (0.0, -1.0):
            with pytest.raises(ValueError, match="tradeoff"):
                BilevelConfig(tradeoff=bad)

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ValueError, match="learning_rate"):
            BilevelConfig(tradeoff=1.0, learning_rate=-0.1)

    def test_zero_learning_rate_allowed(self):
        assert BilevelConfig(tradeoff=1.0, learning_rate=0.0).learning_rate == 0.0

    def test_nonpositive_loop_settings_rejected(self):
        with pytest.raises(ValueError, match="outer_steps"):
            BilevelConfig(tradeoff=1.0, outer_steps=0)
        with pytest.raises(ValueError, match="unroll_length"):
            BilevelConfig(tradeoff=1.0, unroll_length=0)
        with pytest.raises(ValueError, match="stabilizer"):
            BilevelConfig(tradeoff=1.0, stabilizer=0.0)


class TestBilevelObjective:
    def test_base_cost_with_met_target_scores_zero(self):
        rng = np.random.default_rng(15)
        src, dst = make_sides(rng, (1, 1, 2, 2), (1, 2, 1, 2))
        model = MahalanobisModel.identity(2)
        cfg = BilevelConfig(tradeoff=10.0, inner=TIGHT_INNER)
        plan, _, _ = sinkhorn(squared_euclidean_cost(src, dst), TIGHT_INNER)
        target = group_coupling(plan.values, src.labels, dst.labels)
        ev = bilevel_objective(model, src, dst, target, cfg)
        assert ev.discrepancy == 0.0
        assert ev.value == pytest.approx(0.0, abs=1e-12)
        assert ev.inner_converged

    def test_value_decomposition(self):
        rng = np.random.default_rng(16)
        src, dst = make_sides(rng, (1, 2, 1, 2), (2, 1, 2, 1))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.4)
        model = MahalanobisModel(np.diag([1.3, 0.7]))
        cfg = BilevelConfig(tradeoff=7.0, inner=TIGHT_INNER)
        ev = bilevel_objective(model, src, dst, target, cfg)
        assert ev.value == ev.fairness + ev.discrepancy / 7.0
        assert ev.discrepancy > 0.0

    def test_mahalanobis_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        src, dst = make_sides(rng, (1, 1, 2), (1, 2, 2))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.5)
        cfg = BilevelConfig(tradeoff=5.0, inner=TIGHT_INNER, unroll_length=200)
        m0 = np.array([[1.0, 0.2], [0.2, 0.8]])
        ev = bilevel_objective(MahalanobisModel(m0), src, dst, target, cfg)
        analytic = ev.gradient.reshape(2, 2)

        def value(mat):
            sym = (mat + mat.T) / 2.0
            return bilevel_objective(MahalanobisModel(sym), src, dst, target, cfg).value

        numeric = finite_diff(value, m0, step=1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-10)

    def test_mlp_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(18)
        src, dst = make_sides(rng, (1, 1, 2), (1, 2, 2))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.5)
        cfg = BilevelConfig(tradeoff=5.0, inner=TIGHT_INNER, unroll_length=200)
        model = MlpModel.init(2, hidden=4, seed=2)
        ev = bilevel_objective(model, src, dst, target, cfg)

        def value(vec):
            return bilevel_objective(model.from_vector(vec), src, dst, target, cfg).value

        numeric = finite_diff(value, model.to_vector(), step=1e-6)
        np.testing.assert_allclose(ev.gradient, numeric, rtol=1e-3, atol=1e-8)

    def test_unconverged_inner_flagged_with_finite_gradient(self):
        rng = np.random.default_rng(19)
        src, dst = make_sides(rng, (1, 2, 1, 2), (1, 1, 2, 2))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.5)
        cfg = BilevelConfig(tradeoff=5.0,
                            inner=SinkhornConfig(epsilon=1.0, tol=1e-16, max_iter=3))
        ev = bilevel_objective(MahalanobisModel.identity(2), src, dst, target, cfg)
        assert not ev.inner_converged
        assert ev.inner_iterations == 3
        assert np.all(np.isfinite(ev.gradient))


class TestTrainCost:
    def test_zero_learning_rate_freezes_model_and_history(self):
        rng = np.random.default_rng(20)
        src, dst = make_sides(rng, (1, 1, 2, 2), (1, 2, 1, 2))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.5)
        cfg = BilevelConfig(tradeoff=100.0, learning_rate=0.0, outer_steps=5)
        model, history = train_cost(MahalanobisModel.identity(2), src, dst, target, cfg)
        assert not history.diverged
        np.testing.assert_array_equal(model.matrix, np.eye(2))
        assert [row[0] for row in history.rows] == list(range(6))
        first = history.rows[0]
        for row in history.rows[1:]:
            assert row[1:] == first[1:]

    def test_dominant_discrepancy_weight_pins_model(self):
        rng = np.random.default_rng(21)
        src, dst = make_sides(rng, (1, 1, 2, 2), (1, 2, 2, 1))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.3)
        cfg = BilevelConfig(tradeoff=1e-3, learning_rate=1e-8, outer_steps=20)
        model, history = train_cost(MahalanobisModel.identity(2), src, dst, target, cfg)
        assert not history.diverged
        assert abs(history.rows[-1][3] - history.rows[0][3]) <= 1e-6
        assert np.abs(model.matrix - np.eye(2)).max() <= 1e-6

    def test_history_is_finite(self):
        rng = np.random.default_rng(22)
        src, dst = make_sides(rng, (1, 2, 2, 1), (2, 1, 1, 2))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.45)
        cfg = BilevelConfig(tradeoff=500.0, learning_rate=0.05, outer_steps=15)
        _, history = train_cost(MahalanobisModel.identity(2), src, dst, target, cfg)
        values = np.array([row[1:] for row in history.rows], dtype=np.float64)
        assert np.all(np.isfinite(values))

    def test_divergent_start_is_flagged(self):
        rng = np.random.default_rng(23)
        src, dst = make_sides(rng, (1, 2, 1, 2), (1, 2, 2, 1))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.5)
        cfg = BilevelConfig(tradeoff=1e-6, learning_rate=0.1, outer_steps=10)
        start = MahalanobisModel(1e8 * np.eye(2))
        model, history = train_cost(start, src, dst, target, cfg)
        assert history.diverged
        assert len(history.rows) == 1
        np.testing.assert_array_equal(model.matrix, start.matrix)

    def test_training_reduces_fairness_loss(self):
        rng = np.random.default_rng(24)
        labels = rng.permutation(np.repeat([1, 2], 10))
        src = LabeledDataset(rng.normal(size=(20, 2)) + (labels == 2)[:, None], labels)
        dst_labels = rng.permutation(np.repeat([1, 2], 10))
        dst = LabeledDataset(rng.normal(size=(20, 2)) - (dst_labels == 2)[:, None], dst_labels)
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.5)
        cfg = BilevelConfig(tradeoff=1000.0, learning_rate=0.1, outer_steps=60)
        _, history = train_cost(MahalanobisModel.identity(2), src, dst, target, cfg)
        assert not history.diverged
        assert history.rows[-1][1] < 0.5 * history.rows[0][1]


class TestMatchWithLearnedCost:
    def test_identity_model_equals_vanilla(self):
        rng = np.random.default_rng(25)
        src, dst = make_sides(rng, (1, 1, 2, 2), (2, 2, 1, 1))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.5)
        cfg = BilevelConfig(tradeoff=10.0)
        plan, report = match_with_learned_cost(MahalanobisModel.identity(2),
                                               src, dst, target, cfg)
        vanilla, _, vrep = sinkhorn(squared_euclidean_cost(src, dst), cfg.inner)
        np.testing.assert_allclose(plan.values, vanilla.values, atol=1e-12)
        assert report.converged == vrep.converged
        want_fl = fairness_loss(plan, target, src.labels, dst.labels)
        assert report.fairness_loss == want_fl

    def test_matches_direct_cold_solve_bitwise(self):
        rng = np.random.default_rng(26)
        src, dst = make_sides(rng, (1, 2, 1, 2), (1, 2, 2, 1))
        target = target_from_quota(src.group_marginal, dst.group_marginal, 0.4)
        model = MahalanobisModel(random_psd(rng, 2))
        cfg = BilevelConfig(tradeoff=10.0)
        plan, _ = match_with_learned_cost(model, src, dst, target, cfg)
        direct, _, _ = sinkhorn(mahalanobis_cost(model, src, dst).values, cfg.inner)
        np.testing.assert_array_equal(plan.values, direct.values)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(27)
        src = LabeledDataset(rng.normal(size=(4, 3)), (1, 1, 2, 2))
        dst = LabeledDataset(rng.normal(size=(4, 3)), (1, 2, 1, 2))
        model = MlpModel.init(2, hidden=4, seed=0)
        with pytest.raises(ValueError, match="expects dimension"):
            match_with_learned_cost(model, src, dst, np.full((2, 2), 0.25),
                                    BilevelConfig(tradeoff=10.0))


class TestPretrainMlp:
    def test_reaches_base_cost(self):
        rng = np.random.default_rng(28)
        src, dst = make_sides(rng, (1, 1, 1, 2, 2, 2), (1, 1, 2, 2, 2, 1))
        model = pretrain_mlp(MlpModel.init(2, hidden=8, seed=4), src, dst)
        base = squared_euclidean_cost(src, dst).values
        got = mlp_cost(model, src, dst).values
        rel = np.linalg.norm(got - base) / np.linalg.norm(base)
        assert rel < 1e-2


class TestSerialization:
    def test_mahalanobis_round_trip(self, tmp_path):
        rng = np.random.default_rng(29)
        model = MahalanobisModel(random_psd(rng, 3))
        path = tmp_path / "model.json"
        save_model(model, path)
        again = load_model(path)
        assert isinstance(again, MahalanobisModel)
        np.testing.assert_array_equal(again.matrix, model.matrix)

    def test_mlp_round_trip(self, tmp_path):
        model = MlpModel.init(3, hidden=4, seed=6)
        path = tmp_path / "model.json"
        save_model(model, path)
        again = load_model(path)
        assert isinstance(again, MlpModel)
        assert (again.dim, again.hidden, again.out_dim) == (3, 4, 2)
        for t1, t2 in ((again.tower_src, model.tower_src), (again.tower_dst, model.tower_dst)):
            for (w1, b1), (w2, b2) in zip(t1, t2):
                np.testing.assert_array_equal(w1, w2)
                np.testing.assert_array_equal(b1, b2)

    def test_unknown_kind_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"kind": "polynomial"}')
        with pytest.raises(ValueError, match="unknown model kind"):
            load_model(path)

    def test_unsupported_type_rejected(self, tmp_path):
        with pytest.raises(TypeError, match="cannot serialize"):
            save_model(object(), tmp_path / "model.json")
