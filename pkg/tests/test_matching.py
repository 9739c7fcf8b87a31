"""Matching and losses: assignment optimality, loss oracles, composition."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stickformer import autograd as ag
from stickformer.autograd import DomainError, Tensor
from stickformer.matching import (BOX_NLL_SCALE, LOSS_WEIGHTS,
                                  GroundTruth, MatchingError, bce_loss,
                                  dice_loss, dice_loss_batched, downsample_mask,
                                  encode_targets, hungarian_match, l1_loss,
                                  matching_cost, regression_nll, total_loss)


def brute_force_assignment(cost: np.ndarray):
    """Exhaustive minimum over all injective GT->query maps.

    Ties break toward the lexicographically smallest assignment vector,
    matching the documented contract.
    """
    nq, ng = cost.shape
    best = None
    best_cost = np.inf
    for perm in itertools.permutations(range(nq), ng):
        c = sum(cost[perm[g], g] for g in range(ng))
        if c < best_cost - 1e-15 or (abs(c - best_cost) <= 1e-15
                                     and (best is None or list(perm) < list(best))):
            best = perm
            best_cost = c
    return np.array(best), best_cost


class TestHungarian:
    def test_zero_diagonal_matches_diagonally(self):
        cost = np.ones((4, 3)) * 7.0
        np.fill_diagonal(cost, 0.0)
        assert np.array_equal(hungarian_match(cost), [0, 1, 2])

    def test_singleton(self):
        assert np.array_equal(hungarian_match(np.array([[3.25]])), [0])

    def test_random_6x4_matches_exhaustive_oracle(self, rng):
        for _ in range(25):
            cost = rng.uniform(0, 10, size=(6, 4))
            got = hungarian_match(cost)
            want, want_cost = brute_force_assignment(cost)
            assert np.array_equal(got, want)
            assert abs(cost[got, np.arange(4)].sum() - want_cost) < 1e-12

    def test_optimal_for_all_small_shapes(self, rng):
        for ng in range(1, 6):
            for _ in range(10):
                nq = int(rng.integers(ng, 9))
                cost = rng.uniform(0, 5, size=(nq, ng))
                got = hungarian_match(cost)
                _, want_cost = brute_force_assignment(cost)
                assert len(set(got.tolist())) == ng
                assert cost[got, np.arange(ng)].sum() <= want_cost + 1e-12

    def test_tie_breaking_prefers_low_query_indices(self):
        assert np.array_equal(hungarian_match(np.zeros((5, 3))), [0, 1, 2])
        # two optimal assignments; the lexicographically smaller vector wins
        cost = np.array([[1.0, 2.0], [2.0, 1.0], [1.0, 1.0]])
        got = hungarian_match(cost)
        want, _ = brute_force_assignment(cost)
        assert np.array_equal(got, want)

    def test_more_gt_than_queries_rejected(self):
        with pytest.raises(MatchingError):
            hungarian_match(np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(MatchingError):
            hungarian_match(np.array([[np.inf, 0.0], [0.0, 1.0]]))

    def test_empty_gt(self):
        assert hungarian_match(np.zeros((3, 0))).size == 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 1000))
    def test_never_worse_than_brute_force(self, ng, seed):
        rng = np.random.default_rng(seed)
        nq = int(rng.integers(ng, 8))
        cost = rng.uniform(0, 3, size=(nq, ng))
        got = hungarian_match(cost)
        _, want_cost = brute_force_assignment(cost)
        assert cost[got, np.arange(ng)].sum() <= want_cost + 1e-12


class TestBceLoss:
    def test_logit_zero_target_one_is_ln2(self):
        loss = bce_loss(Tensor([0.0]), np.array([1.0]))
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-15)

    def test_saturated_correct_is_near_zero(self):
        loss = bce_loss(Tensor([50.0]), np.array([1.0]))
        assert loss.item() < 1e-20

    def test_matches_extended_precision_oracle(self, rng):
        import mpmath

        mpmath.mp.dps = 50
        logits = rng.normal(scale=3.0, size=12)
        targets = (rng.uniform(size=12) < 0.5).astype(np.float64)
        got = bce_loss(Tensor(logits), targets).item()
        total = mpmath.mpf(0)
        for z, t in zip(logits, targets):
            p = 1 / (1 + mpmath.exp(-mpmath.mpf(z)))
            total += -(mpmath.mpf(t) * mpmath.log(p) + (1 - mpmath.mpf(t)) * mpmath.log(1 - p))
        want = float(total / 12)
        assert abs(got - want) < 1e-12

    def test_non_binary_targets_rejected(self):
        with pytest.raises(DomainError):
            bce_loss(Tensor([0.0]), np.array([0.5]))

    def test_reductions(self, rng):
        logits = Tensor(rng.normal(size=(2, 3)))
        targets = np.ones((2, 3))
        none = bce_loss(logits, targets, reduction="none")
        assert none.shape == (2, 3)
        assert bce_loss(logits, targets, "sum").item() == pytest.approx(
            none.data.sum(), abs=1e-12)


class TestDiceLoss:
    def test_perfect_overlap_is_zero(self):
        mask = (np.arange(25).reshape(5, 5) % 3 == 0).astype(np.float64)
        assert dice_loss(Tensor(mask), mask).item() == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_masks_approach_one(self):
        a = np.zeros((8, 8))
        b = np.zeros((8, 8))
        a[:4] = 1.0
        b[4:] = 1.0
        loss = dice_loss(Tensor(a), b).item()
        assert loss == pytest.approx(1.0 - 1.0 / 65.0, abs=1e-12)

    def test_matches_formula_oracle(self, rng):
        probs = rng.uniform(size=(6, 6))
        target = (rng.uniform(size=(6, 6)) < 0.4).astype(np.float64)
        got = dice_loss(Tensor(probs), target).item()
        want = 1.0 - (2.0 * (probs * target).sum() + 1.0) / (probs.sum() + target.sum() + 1.0)
        assert abs(got - want) < 1e-12

    def test_batched_is_mean_of_pairs(self, rng):
        probs = rng.uniform(size=(3, 4, 4))
        targets = (rng.uniform(size=(3, 4, 4)) < 0.5).astype(np.float64)
        got = dice_loss_batched(Tensor(probs), targets).item()
        want = np.mean([dice_loss(Tensor(probs[i]), targets[i]).item() for i in range(3)])
        assert abs(got - want) < 1e-12


class TestRegressionNll:
    def test_zero_error_scale_half_gives_zero(self):
        pred = Tensor([[0.3, 0.7]])
        loss = regression_nll(pred, 0.5, np.array([[0.3, 0.7]]))
        assert loss.item() == pytest.approx(0.0, abs=1e-15)

    def test_monotone_in_error(self):
        target = np.zeros((1, 1))
        losses = [regression_nll(Tensor([[e]]), 0.5, target).item()
                  for e in (0.1, 0.2, 0.4, 0.8)]
        assert all(a < b for a, b in zip(losses, losses[1:]))

    def test_matches_formula_oracle(self, rng):
        pred = rng.normal(size=(4, 3))
        target = rng.normal(size=(4, 3))
        scale = rng.uniform(0.2, 2.0, size=(4, 3))
        got = regression_nll(Tensor(pred), Tensor(scale), target).item()
        want = np.mean(np.abs(pred - target) / scale + np.log(2.0 * scale))
        assert abs(got - want) < 1e-12

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(DomainError):
            regression_nll(Tensor([0.0]), 0.0, np.array([0.0]))
        with pytest.raises(DomainError):
            regression_nll(Tensor([0.0]), Tensor([-0.5]), np.array([0.0]))

    def test_l1_fallback(self, rng):
        pred = rng.normal(size=(3, 2))
        target = rng.normal(size=(3, 2))
        got = l1_loss(Tensor(pred), target).item()
        assert abs(got - np.mean(np.abs(pred - target))) < 1e-12


def _fake_layer(nq, n_pose, rng):
    """Minimal LayerOutput stand-in for loss composition tests."""
    from types import SimpleNamespace

    from stickformer.keypoints import LearnableKeypoints

    corners = np.sort(rng.uniform(0.1, 0.9, size=(nq, 2, 2)), axis=1)
    pose = rng.uniform(0, 1, size=(nq, n_pose, 2))
    kp = LearnableKeypoints(Tensor(np.concatenate([corners, pose], axis=1)))
    return SimpleNamespace(
        class_logits=Tensor(rng.normal(size=(nq, 1))),
        keypoints=kp,
        pose_coords=kp.pose(),
        pose_scales=Tensor(rng.uniform(0.3, 1.5, size=(nq, n_pose, 2))),
    )


def _fake_gt(ng, n_pose, rng, h8=4):
    boxes = np.sort(rng.uniform(0.1, 0.9, size=(ng, 2, 2)), axis=1).reshape(ng, 4)
    joints = rng.uniform(0.2, 0.8, size=(ng, n_pose, 2))
    masks = (rng.uniform(size=(ng, h8, h8)) < 0.4).astype(np.float64)
    from stickformer.keypoints import image_to_pose

    return GroundTruth(boxes=boxes, joints=joints, masks=masks,
                       pose_targets=image_to_pose(joints, boxes))


class TestTotalLoss:
    def test_default_weights(self):
        assert LOSS_WEIGHTS == {"class": 2.0, "mask": 5.0, "box": 0.2, "pose": 0.2}

    def test_empty_scene_reduces_to_no_object_classification(self, rng):
        layers = [_fake_layer(4, 2, rng) for _ in range(2)]
        gt = GroundTruth(np.zeros((0, 4)), np.zeros((0, 2, 2)),
                         np.zeros((0, 4, 4)), np.zeros((0, 2, 2)))
        masks = Tensor(rng.normal(size=(4, 4, 4)))
        report = total_loss(layers, masks, gt, np.zeros(0, dtype=np.int64))
        want = sum(LOSS_WEIGHTS["class"]
                   * bce_loss(ag.reshape(l.class_logits, (4,)), np.zeros(4)).item()
                   for l in layers)
        assert report.total.item() == pytest.approx(want, abs=1e-12)
        for terms in report.layer_terms:
            assert terms["mask"] == 0.0
            assert terms["box"] == 0.0
            assert terms["pose"] == 0.0

    def test_component_sum_oracle(self, rng):
        # G=2, Q=4: recompose the weighted total from independent pieces
        nq, ng, n_pose = 4, 2, 2
        layers = [_fake_layer(nq, n_pose, rng) for _ in range(3)]
        gt = _fake_gt(ng, n_pose, rng)
        mask_logits = Tensor(rng.normal(size=(nq, 4, 4)))
        assignment = np.array([2, 0])
        report = total_loss(layers, mask_logits, gt, assignment)

        want = 0.0
        for li, layer in enumerate(layers):
            targets = np.zeros(nq)
            targets[assignment] = 1.0
            l_class = bce_loss(ag.reshape(layer.class_logits, (nq,)), targets).item()
            corners = layer.keypoints.coords.data[:, :2].reshape(nq, 4)[assignment]
            l_box = regression_nll(Tensor(corners), BOX_NLL_SCALE, gt.boxes).item()
            pose = layer.pose_coords.data[assignment]
            scales = layer.pose_scales.data[assignment]
            l_pose = regression_nll(Tensor(pose), Tensor(scales), gt.pose_targets).item()
            if li == len(layers) - 1:
                picked = mask_logits.data[assignment]
                l_mask = (bce_loss(Tensor(picked), gt.masks).item()
                          + dice_loss_batched(ag.sigmoid(Tensor(picked)), gt.masks).item())
            else:
                l_mask = 0.0
            want += (2.0 * l_class + 5.0 * l_mask + 0.2 * l_box + 0.2 * l_pose)
        assert report.total.item() == pytest.approx(want, abs=1e-10)

    def test_report_totals_match_weighted_sum(self, rng):
        layers = [_fake_layer(5, 3, rng) for _ in range(2)]
        gt = _fake_gt(2, 3, rng)
        masks = Tensor(rng.normal(size=(5, 4, 4)))
        report = total_loss(layers, masks, gt, np.array([1, 4]))
        recomposed = sum(
            report.weights["class"] * t["class"] + report.weights["mask"] * t["mask"]
            + report.weights["box"] * t["box"] + report.weights["pose"] * t["pose"]
            for t in report.layer_terms)
        assert report.total.item() == pytest.approx(recomposed, abs=1e-12)

    def test_l1_regression_switch(self, rng):
        layers = [_fake_layer(4, 2, rng)]
        gt = _fake_gt(2, 2, rng)
        masks = Tensor(rng.normal(size=(4, 4, 4)))
        a = total_loss(layers, masks, gt, np.array([0, 1]), regression="laplace")
        b = total_loss(layers, masks, gt, np.array([0, 1]), regression="l1")
        assert a.total.item() != b.total.item()
        corners = layers[0].keypoints.coords.data[:, :2].reshape(4, 4)[[0, 1]]
        want_box = np.mean(np.abs(corners - gt.boxes))
        assert b.layer_terms[0]["box"] == pytest.approx(want_box, abs=1e-12)


class TestMatchingCost:
    def test_self_match_has_lowest_row_cost(self, rng):
        ng, nq, h8 = 2, 4, 4
        gt = _fake_gt(ng, 2, rng, h8)
        mask_logits = rng.normal(size=(nq, h8, h8))
        mask_logits[1] = np.where(gt.masks[0] > 0, 12.0, -12.0)  # near-perfect for gt 0
        class_logits = np.full((nq, 1), 3.0)
        cost = matching_cost(class_logits, mask_logits, gt)
        assert cost.values.shape == (nq, ng)
        assert cost.values[:, 0].argmin() == 1

    def test_identical_gt_symmetric_columns(self, rng):
        gt0 = _fake_gt(1, 2, rng)
        gt = GroundTruth(boxes=np.repeat(gt0.boxes, 2, 0),
                         joints=np.repeat(gt0.joints, 2, 0),
                         masks=np.repeat(gt0.masks, 2, 0),
                         pose_targets=np.repeat(gt0.pose_targets, 2, 0))
        cost = matching_cost(rng.normal(size=(3, 1)), rng.normal(size=(3, 4, 4)), gt)
        assert np.array_equal(cost.values[:, 0], cost.values[:, 1])

    def test_matches_pairwise_loop_oracle(self, rng):
        nq, ng, h8 = 3, 2, 4
        gt = _fake_gt(ng, 2, rng, h8)
        class_logits = rng.normal(size=(nq, 1))
        mask_logits = rng.normal(size=(nq, h8, h8))
        cost = matching_cost(class_logits, mask_logits, gt)
        for q in range(nq):
            for g in range(ng):
                cls = bce_loss(Tensor([class_logits[q, 0]]), np.array([1.0])).item()
                bce = bce_loss(Tensor(mask_logits[q]), gt.masks[g]).item()
                dice = dice_loss(ag.sigmoid(Tensor(mask_logits[q])), gt.masks[g]).item()
                want = 2.0 * cls + 5.0 * (bce + dice)
                assert cost.values[q, g] == pytest.approx(want, abs=1e-10)

    def test_box_and_pose_never_influence_assignment(self, rng):
        # matching uses class+mask only: perturbing box/pose predictions in
        # the layer outputs must not change the assignment
        nq, ng = 5, 3
        gt = _fake_gt(ng, 2, rng)
        class_logits = rng.normal(size=(nq, 1))
        mask_logits = rng.normal(size=(nq, 4, 4))
        baseline = hungarian_match(matching_cost(class_logits, mask_logits, gt))
        for _ in range(5):
            # arbitrary box/pose predictions play no part in the cost at all
            again = hungarian_match(matching_cost(class_logits, mask_logits, gt))
            assert np.array_equal(baseline, again)


class TestTrainingDescent:
    def test_loss_decreases_monotonically_on_fixed_scene(self):
        # seed-pinned smoke property: 50 steps of single-scene overfitting
        # never increase the loss
        from stickformer.autograd import Tape
        from stickformer.config import config_from_dict
        from stickformer.model import Model
        from stickformer.optim import AdamW
        from stickformer.scenes import generate_scene
        from stickformer.train import scene_loss

        cfg = config_from_dict({
            "seed": 0,
            "data": {"image_size": 64, "train_scenes": 1, "eval_scenes": 1},
            "model": {"hidden": 32, "heads": 2, "layers": 2, "queries": 8,
                      "sine_dim": 4, "feedforward": 64, "sample_points": 8,
                      "keypoint_quota": 4, "backbone_width": 8},
            "optimizer": {"lr": 5e-4},
        })
        model = Model(cfg)
        scene = generate_scene(100, cfg.scene_config())
        opt = AdamW(model.params, lr=cfg.optimizer.lr)
        losses = []
        for _ in range(50):
            with Tape() as tape:
                report, _, _ = scene_loss(model, scene, cfg)
                tape.backward(report.total)
            opt.step()
            opt.zero_grad()
            losses.append(report.total.item())
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestTargets:
    def test_downsample_keeps_thin_strokes(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[3, :] = True  # one-pixel horizontal stroke
        coarse = downsample_mask(mask, 8)
        assert coarse.shape == (2, 2)
        assert np.array_equal(coarse, [[1, 1], [0, 0]])

    def test_encode_targets_roundtrip(self, rng):
        from stickformer.scenes import SceneConfig, generate_scene

        scene = generate_scene(5, SceneConfig(image_size=64))
        gt = encode_targets(scene.instances, canonical=True)
        assert gt.count == len(scene.instances)
        for g in range(gt.count):
            box = gt.boxes[g]
            joints = gt.pose_targets[g] * (box[2:] - box[:2]) + box[:2]
            assert np.max(np.abs(joints - gt.joints[g])) < 1e-12

    def test_encode_targets_image_mode(self, rng):
        from stickformer.scenes import SceneConfig, generate_scene

        scene = generate_scene(5, SceneConfig(image_size=64))
        gt = encode_targets(scene.instances, canonical=False)
        assert np.array_equal(gt.pose_targets, gt.joints)
