import logging
import math

import numpy as np
import pytest

from obblab.assignment import GroundTruth, MasConfig, assign_mas, generate_anchors
from obblab.geometry import normalize_obb
from obblab.losses import (
    BetaState,
    BoxDelta,
    LossTargets,
    MultiTaskLossConfig,
    SmoothL1Config,
    box_deltas,
    build_loss_targets,
    decode_box_deltas,
    focal_loss,
    focal_loss_grad,
    multi_task_loss,
    scale_similarity,
    smooth_l1,
    smooth_l1_grad,
    update_beta,
    wrap_angle_delta,
)

QP = math.pi / 4.0


class TestBoxDeltas:
    def test_identity(self):
        box = normalize_obb(3, 4, 10, 5, 0.3)
        delta = box_deltas(box, box)
        assert delta.as_array() == pytest.approx(np.zeros(5))

    def test_log_width_ratio(self):
        anchor = normalize_obb(0, 0, 10, 4, 0.1)
        gt = normalize_obb(0, 0, 10 * math.e, 4, 0.1)
        assert box_deltas(anchor, gt).dw == pytest.approx(1.0)

    def test_round_trip_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            anchor = normalize_obb(
                rng.uniform(-50, 50), rng.uniform(-50, 50),
                rng.uniform(1, 40), rng.uniform(1, 40), rng.uniform(-3, 3),
            )
            gt = normalize_obb(
                rng.uniform(-50, 50), rng.uniform(-50, 50),
                rng.uniform(1, 40), rng.uniform(1, 40), rng.uniform(-3, 3),
            )
            back = decode_box_deltas(anchor, box_deltas(anchor, gt))
            assert back.cx == pytest.approx(gt.cx, abs=1e-9)
            assert back.cy == pytest.approx(gt.cy, abs=1e-9)
            assert back.w == pytest.approx(gt.w, abs=1e-9)
            assert back.h == pytest.approx(gt.h, abs=1e-9)
            dtheta = abs(back.theta - gt.theta)
            assert min(dtheta, math.pi - dtheta) == pytest.approx(0, abs=1e-9)

    def test_angle_delta_wrapped_range(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            delta = wrap_angle_delta(rng.uniform(-10, 10))
            assert -math.pi / 2 < delta <= math.pi / 2
        assert wrap_angle_delta(math.pi / 2) == pytest.approx(math.pi / 2)
        assert wrap_angle_delta(-math.pi / 2) == pytest.approx(math.pi / 2)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(0.0, 1.0) == 0.0

    def test_knee_continuity(self):
        beta = 0.7
        assert smooth_l1(beta, beta) == pytest.approx(0.5 * beta)
        assert smooth_l1(beta - 1e-12, beta) == pytest.approx(0.5 * beta, abs=1e-9)

    def test_linear_branch(self):
        assert smooth_l1(2.0, 1.0) == 1.5
        assert smooth_l1(-2.0, 1.0) == 1.5

    def test_gradient_values(self):
        assert smooth_l1_grad(0.0, 1.0) == 0.0
        assert smooth_l1_grad(10.0, 1.0) == 1.0
        assert smooth_l1_grad(0.5, 1.0) == 0.5
        assert smooth_l1_grad(-10.0, 1.0) == -1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        beta = 1.0
        step = 1e-6
        count = 0
        while count < 1000:
            x = float(rng.uniform(-4, 4))
            if abs(abs(x) - beta) < 1e-4 or abs(x) < step:
                continue
            fd = (smooth_l1(x + step, beta) - smooth_l1(x - step, beta)) / (2 * step)
            ana = smooth_l1_grad(x, beta)
            assert abs(ana - fd) / max(abs(fd), 1e-12) < 1e-5
            count += 1

    def test_beta_monotonicity_claims(self):
        # loss non-increasing in beta on the linear regime, gradient
        # magnitude non-increasing in beta everywhere
        betas = np.linspace(0.05, 2.0, 50)
        for x in (0.01, 0.5, 1.5, 3.0, -2.0):
            linear = [smooth_l1(x, float(b)) for b in betas if abs(x) >= b]
            assert all(a >= b for a, b in zip(linear, linear[1:]))
            grads = [abs(smooth_l1_grad(x, float(b))) for b in betas]
            assert all(a >= b - 1e-12 for a, b in zip(grads, grads[1:]))

    def test_convex_even(self):
        xs = np.linspace(-3, 3, 101)
        vals = smooth_l1(xs, 0.8)
        assert vals == pytest.approx(smooth_l1(-xs, 0.8))
        second = np.diff(vals, 2)
        assert np.all(second >= -1e-9)

    def test_rejects_nonpositive_beta(self):
        with pytest.raises(ValueError):
            smooth_l1(1.0, 0.0)
        with pytest.raises(ValueError):
            smooth_l1_grad(1.0, -1.0)


class TestFocalLoss:
    def test_reference_value(self):
        assert focal_loss(0.5, 1, alpha=0.25, gamma=2.0) == pytest.approx(0.25 * 0.25 * math.log(2))

    def test_gamma_zero_reduces_to_weighted_cross_entropy(self):
        p = 0.73
        assert focal_loss(p, 1, alpha=0.5, gamma=0.0) == pytest.approx(-0.5 * math.log(p))
        assert focal_loss(p, 0, alpha=0.5, gamma=0.0) == pytest.approx(-0.5 * math.log(1 - p))

    def test_easy_positive_downweighted_to_zero(self):
        assert focal_loss(1.0 - 1e-9, 1) == pytest.approx(0.0, abs=1e-12)

    def test_extreme_probabilities_clamped(self):
        assert math.isfinite(focal_loss(0.0, 1))
        assert math.isfinite(focal_loss(1.0, 0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        step = 1e-6
        for i in range(1000):
            p = float(rng.uniform(0.001, 0.999))
            t = i % 2
            fd = (focal_loss(p + step, t) - focal_loss(p - step, t)) / (2 * step)
            ana = focal_loss_grad(p, t)
            assert abs(ana - fd) / max(abs(fd), 1e-12) < 1e-5

    def test_gamma_zero_gradient(self):
        p = 0.4
        assert focal_loss_grad(p, 1, alpha=0.5, gamma=0.0) == pytest.approx(-0.5 / p)


class TestScaleSimilarity:
    def test_equal_areas(self):
        a = normalize_obb(0, 0, 8, 5, 0.2)
        b = normalize_obb(9, 9, 10, 4, 1.0)
        assert scale_similarity(a, b) == 1.0

    def test_quarter_area(self):
        prop = normalize_obb(0, 0, 20, 8, 0)
        gt = normalize_obb(0, 0, 10, 4, 0)
        assert scale_similarity(prop, gt) == pytest.approx(0.5)

    def test_symmetric(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            a = normalize_obb(0, 0, rng.uniform(1, 30), rng.uniform(1, 30), 0)
            b = normalize_obb(0, 0, rng.uniform(1, 30), rng.uniform(1, 30), 0)
            assert scale_similarity(a, b) == scale_similarity(b, a)
            assert 0 < scale_similarity(a, b) <= 1


class TestUpdateBeta:
    def test_median_target_example(self):
        state = update_beta(BetaState(), [0.6, 0.8, 0.9])
        assert state.history == pytest.approx(0.2)
        assert state.beta_scale == pytest.approx(0.9 * 1.0 + 0.1 * 0.2)

    def test_perfect_similarity_converges_to_floor(self):
        state = BetaState()
        for _ in range(500):
            state = update_beta(state, [1.0, 1.0])
        assert state.beta_scale == state.clamp[0]

    def test_zero_momentum_jumps_to_target(self):
        state = update_beta(BetaState(momentum=0.0), [0.5])
        assert state.beta_scale == 0.5

    def test_empty_batch_unchanged_and_logged(self, caplog):
        state = BetaState(beta_scale=0.4)
        with caplog.at_level(logging.WARNING, logger="obblab.losses"):
            out = update_beta(state, [])
        assert out == state
        assert any("no similarities" in record.message for record in caplog.records)

    def test_clamp_always_holds(self):
        rng = np.random.default_rng(17)
        state = BetaState(beta_scale=0.5, momentum=0.3, clamp=(0.1, 0.6))
        for _ in range(300):
            sims = rng.uniform(0, 1, size=rng.integers(1, 8))
            state = update_beta(state, sims)
            assert 0.1 <= state.beta_scale <= 0.6

    def test_step_bounded_by_momentum(self):
        rng = np.random.default_rng(19)
        state = BetaState(beta_scale=0.5, momentum=0.8)
        for _ in range(100):
            sims = rng.uniform(0.2, 1.0, size=5)
            new = update_beta(state, sims)
            target = float(np.median(1 - sims))
            assert abs(new.beta_scale - state.beta_scale) <= (1 - 0.8) * abs(target - state.beta_scale) + 1e-12
            state = new

    def test_target_permutation_invariant(self):
        sims = [0.9, 0.3, 0.55, 0.7, 0.1]
        a = update_beta(BetaState(), sims)
        b = update_beta(BetaState(), sims[::-1])
        assert a.history == b.history

    def test_kth_smallest_mode(self):
        state = update_beta(BetaState(momentum=0.0), [0.6, 0.8, 0.9], statistic="kth-smallest", k=1)
        assert state.history == pytest.approx(0.1)  # smallest mismatch
        with pytest.raises(ValueError):
            update_beta(BetaState(), [0.5], statistic="kth-smallest", k=5)

    def test_state_validation(self):
        with pytest.raises(ValueError):
            BetaState(beta_scale=2.0, clamp=(0.1, 1.0))
        with pytest.raises(ValueError):
            BetaState(momentum=1.0)


@pytest.fixture(scope="module")
def small_assignment():
    grid = generate_anchors(128, [8, 16], 4)
    gts = [
        GroundTruth(normalize_obb(36.0, 36.0, 34.0, 30.0, 0.0), class_id=1),
        GroundTruth(normalize_obb(90.0, 90.0, 60.0, 24.0, 0.5), class_id=0),
    ]
    assignment = assign_mas(grid, gts, MasConfig())
    return grid, gts, assignment


class TestMultiTaskLoss:
    def test_perfect_predictions_near_zero(self, small_assignment):
        grid, gts, assignment = small_assignment
        targets = build_loss_targets(grid, gts, assignment)
        eps = 1e-9
        cls_pred = np.full((grid.num_anchors, 2), eps)
        for anchor in np.nonzero(assignment.gt_index >= 0)[0]:
            cls_pred[anchor, targets.class_ids[anchor]] = 1 - eps
        breakdown = multi_task_loss(assignment, targets.deltas, cls_pred, targets)
        assert breakdown.total <= 1e-6
        assert breakdown.num_positives == assignment.num_positives

    def test_zero_positives_gives_cls_only(self):
        grid = generate_anchors(64, [8], 4)
        assignment = assign_mas(grid, [], MasConfig())
        targets = LossTargets(deltas=np.zeros((grid.num_anchors, 5)), class_ids=np.zeros(grid.num_anchors, dtype=int))
        deltas_pred = np.ones((grid.num_anchors, 5))
        cls_pred = np.full((grid.num_anchors, 1), 0.3)
        breakdown = multi_task_loss(assignment, deltas_pred, cls_pred, targets)
        assert breakdown.reg_loss == 0.0
        assert breakdown.cls_loss > 0.0
        assert breakdown.total == breakdown.cls_loss

    def test_lambda_scales_reg_term_exactly(self, small_assignment):
        grid, gts, assignment = small_assignment
        targets = build_loss_targets(grid, gts, assignment)
        rng = np.random.default_rng(23)
        deltas_pred = targets.deltas + rng.normal(0, 0.3, size=targets.deltas.shape)
        cls_pred = np.full((grid.num_anchors, 2), 0.2)
        one = multi_task_loss(assignment, deltas_pred, cls_pred, targets, MultiTaskLossConfig(lambda_reg=1.0))
        two = multi_task_loss(assignment, deltas_pred, cls_pred, targets, MultiTaskLossConfig(lambda_reg=2.0))
        assert two.reg_loss == pytest.approx(2 * one.reg_loss, rel=1e-12)
        assert two.cls_loss == pytest.approx(one.cls_loss, rel=1e-12)

    def test_anchor_reordering_invariance(self, small_assignment):
        grid, gts, assignment = small_assignment
        targets = build_loss_targets(grid, gts, assignment)
        rng = np.random.default_rng(29)
        deltas_pred = rng.normal(size=(grid.num_anchors, 5))
        cls_pred = rng.uniform(0.05, 0.95, size=(grid.num_anchors, 2))
        base = multi_task_loss(assignment, deltas_pred, cls_pred, targets)

        perm = rng.permutation(grid.num_anchors)
        permuted_assignment = type(assignment)(
            gt_index=assignment.gt_index[perm],
            thresholds=assignment.thresholds,
            positive_counts=assignment.positive_counts,
        )
        permuted_targets = LossTargets(deltas=targets.deltas[perm], class_ids=targets.class_ids[perm])
        permuted = multi_task_loss(permuted_assignment, deltas_pred[perm], cls_pred[perm], permuted_targets)
        assert permuted.total == pytest.approx(base.total, rel=1e-12)

    def test_refined_head_composition(self, small_assignment):
        grid, gts, assignment = small_assignment
        targets = build_loss_targets(grid, gts, assignment)
        rng = np.random.default_rng(31)
        deltas_pred = targets.deltas + rng.normal(0, 0.2, size=targets.deltas.shape)
        cls_pred = np.full((grid.num_anchors, 2), 0.2)
        single = multi_task_loss(assignment, deltas_pred, cls_pred, targets)
        both = multi_task_loss(
            assignment, deltas_pred, cls_pred, targets,
            refined_deltas=deltas_pred, refined_cls=cls_pred,
        )
        assert both.total == pytest.approx(2 * single.total, rel=1e-12)
        halved = multi_task_loss(
            assignment, deltas_pred, cls_pred, targets,
            MultiTaskLossConfig(alpha_refined=0.5),
            refined_deltas=deltas_pred, refined_cls=cls_pred,
        )
        assert halved.total == pytest.approx(1.5 * single.total, rel=1e-12)

    def test_shape_mismatch_rejected(self, small_assignment):
        grid, gts, assignment = small_assignment
        targets = build_loss_targets(grid, gts, assignment)
        with pytest.raises(ValueError):
            multi_task_loss(assignment, np.zeros((3, 5)), np.zeros((grid.num_anchors, 1)), targets)

    def test_ignore_anchors_excluded_from_cls(self):
        from obblab.assignment import IGNORE, NEGATIVE, AssignmentResult

        gt_index = np.array([0, NEGATIVE, IGNORE, NEGATIVE])
        assignment = AssignmentResult(
            gt_index=gt_index, thresholds=np.array([0.5]), positive_counts=np.array([1])
        )
        targets = LossTargets(deltas=np.zeros((4, 5)), class_ids=np.zeros(4, dtype=int))
        deltas_pred = np.zeros((4, 5))
        base = np.full((4, 1), 0.5)
        loud = base.copy()
        loud[2, 0] = 0.999  # only the ignored anchor changes
        a = multi_task_loss(assignment, deltas_pred, base, targets)
        b = multi_task_loss(assignment, deltas_pred, loud, targets)
        assert a.total == pytest.approx(b.total, rel=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SmoothL1Config(beta=0.0)
