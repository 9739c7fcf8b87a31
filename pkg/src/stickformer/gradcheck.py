"""Randomized gradient verification against central finite differences.

Every differentiable operation (and the full model loss) is checked at
random points: reverse-mode directional derivatives are compared with
(f(x+h*d) - f(x-h*d)) / 2h along random directions, h = 1e-6. Points are
kept away from non-smooth loci (ReLU kinks, bilinear grid lines). The
reported error is |analytic - numeric| / max(|analytic|, |numeric|, 1).
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autograd as ag
from . import heads as heads_mod
from . import nn
from .attention import (FeaturePyramid, bilinear_sample, build_sampling_plan,
                        deform_attn_keypoints, generate_offsets,
                        init_deform_attention)
from .autograd import Tape, Tensor
from .config import config_from_dict
from .keypoints import LearnableKeypoints, sine_encode, structural_embedding
from .matching import bce_loss, dice_loss, regression_nll
from .model import Model
from .scenes import generate_scene

DEFAULT_TRIALS = 20
FD_STEP = 1e-6


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return ag.parameter(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, shape, margin=0.2) -> Tensor:
    mag = rng.uniform(margin, 1.5, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return ag.parameter(mag * sign)


def _project(out: Tensor, rng) -> Tensor:
    """Random linear functional of the output, so every entry matters."""
    return ag.tsum(ag.mul(out, ag.constant(rng.normal(size=out.shape))))


def directional_error(build, rng, h: float = FD_STEP, retries: int = 8) -> float:
    """One trial: build inputs, compare analytic vs numeric derivative.

    Central differences are only meaningful where the function is locally
    smooth; a random point occasionally straddles a subgradient kink
    (ReLU/abs at ~1e-6). Those points are detected by disagreeing one-sided
    slopes and resampled, which implements the keep-away-from-kinks rule
    uniformly for every check.
    """
    last = None
    for _ in range(retries):
        f, leaves = build(rng)
        with Tape() as tape:
            out = f()
            tape.backward(out)
        grads = [leaf.grad.copy() for leaf in leaves]
        for leaf in leaves:
            leaf.grad = None

        dirs = [rng.normal(size=leaf.data.shape) for leaf in leaves]
        norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))

        f0 = out.item()
        saved = [leaf.data.copy() for leaf in leaves]
        values = []
        for sign in (1.0, -1.0):
            for leaf, d, orig in zip(leaves, dirs, saved):
                leaf.data = orig + sign * h * d
            values.append(f().item())
        for leaf, orig in zip(leaves, saved):
            leaf.data = orig
        numeric = (values[0] - values[1]) / (2.0 * h)
        last = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)

        fwd = (values[0] - f0) / h
        bwd = (f0 - values[1]) / h
        straddles_kink = abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1.0)
        if not straddles_kink:
            return last
    return last


# ---------------------------------------------------------------------------
# check builders


def _binary(op, smooth=True):
    def build(rng):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (4,), lo=0.5, hi=1.5)  # broadcast and (for div) positive
        proj = ag.constant(rng.normal(size=(3, 4)))
        return (lambda: ag.tsum(ag.mul(op(a, b), proj))), [a, b]
    return build


def _binary_kinked(op):
    def build(rng):
        a = _away_from_zero(rng, (3, 4))
        b = ag.parameter(a.data + np.where(rng.uniform(size=(3, 4)) < 0.5, 0.3, -0.3))
        proj = ag.constant(rng.normal(size=(3, 4)))
        return (lambda: ag.tsum(ag.mul(op(a, b), proj))), [a, b]
    return build


def _unary(op, kinked=False, positive=False):
    def build(rng):
        if positive:
            x = _leaf(rng, (2, 5), lo=0.3, hi=2.0)
        elif kinked:
            x = _away_from_zero(rng, (2, 5))
        else:
            x = _leaf(rng, (2, 5), lo=-2.0, hi=2.0)
        proj = ag.constant(rng.normal(size=(2, 5)))
        return (lambda: ag.tsum(ag.mul(op(x), proj))), [x]
    return build


def _clamp_interior(rng):
    x = ag.parameter(rng.uniform(-0.8, 0.8, size=(3, 3)))
    proj = ag.constant(rng.normal(size=(3, 3)))
    return (lambda: ag.tsum(ag.mul(ag.clamp(x, -1.0, 1.0), proj))), [x]


def _matmul_2d(rng):
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4, 2))
    proj = ag.constant(rng.normal(size=(3, 2)))
    return (lambda: ag.tsum(ag.mul(ag.matmul(a, b), proj))), [a, b]


def _matmul_batched(rng):
    a = _leaf(rng, (2, 3, 4))
    b = _leaf(rng, (2, 4, 5))
    proj = ag.constant(rng.normal(size=(2, 3, 5)))
    return (lambda: ag.tsum(ag.mul(ag.matmul(a, b), proj))), [a, b]


def _softmax_check(rng):
    x = _leaf(rng, (4, 6), lo=-3.0, hi=3.0)
    proj = ag.constant(rng.normal(size=(4, 6)))
    return (lambda: ag.tsum(ag.mul(ag.softmax(x, axis=-1), proj))), [x]


def _reductions(rng):
    x = _leaf(rng, (3, 4, 2))
    proj = ag.constant(rng.normal(size=(3, 2)))
    return (lambda: ag.add(ag.tsum(ag.mul(ag.tmean(x, axis=1), proj)),
                           ag.tsum(x))), [x]


def _movers(rng):
    x = _leaf(rng, (4, 6))
    idx = rng.integers(0, 24, size=10)
    proj = ag.constant(rng.normal(size=(3, 4, 2)))
    projt = ag.constant(rng.normal(size=10))

    def f():
        r = ag.reshape(x, (3, 4, 2))
        t = ag.transpose(r, (1, 0, 2))
        c = ag.concat([t[:2], t[2:]], axis=0)
        back = ag.transpose(c, (1, 0, 2))
        a = ag.tsum(ag.mul(back, proj))
        b = ag.tsum(ag.mul(ag.take(x, idx), projt))
        return ag.add(a, b)
    return f, [x]


def _pad_check(rng):
    x = _leaf(rng, (3, 4, 2))
    proj = ag.constant(rng.normal(size=(5, 6, 2)))
    return (lambda: ag.tsum(ag.mul(ag.pad2d(x, 1), proj))), [x]


def _layer_norm_check(rng):
    params = {}
    nn.init_layer_norm(params, "ln", 6)
    params["ln.gamma"] = _leaf(rng, (6,), lo=0.5, hi=1.5)
    params["ln.beta"] = _leaf(rng, (6,), lo=-0.5, hi=0.5)
    x = _leaf(rng, (4, 6))
    proj = ag.constant(rng.normal(size=(4, 6)))
    leaves = [x, params["ln.gamma"], params["ln.beta"]]
    return (lambda: ag.tsum(ag.mul(nn.layer_norm(x, params, "ln"), proj))), leaves


def _attention_check(rng):
    params = {}
    nn.init_self_attention(params, int(rng.integers(1 << 30)), "sa", 8)
    x = _leaf(rng, (5, 8))
    proj = ag.constant(rng.normal(size=(5, 8)))
    leaves = [x] + list(params.values())
    return (lambda: ag.tsum(ag.mul(
        nn.self_attention(x, x, x, params, "sa", heads=2), proj))), leaves


def _conv_check(rng):
    params = {}
    nn.init_conv(params, int(rng.integers(1 << 30)), "c", 2, 3)
    x = _leaf(rng, (6, 6, 2))
    proj = ag.constant(rng.normal(size=(3, 3, 3)))
    leaves = [x] + list(params.values())
    return (lambda: ag.tsum(ag.mul(
        nn.conv2d(x, params, "c", stride=2), proj))), leaves


def _sine_embedding_check(rng):
    params = {}
    nn.init_mlp3(params, int(rng.integers(1 << 30)), "emb", 2 * 4 * 4, 8, 8)
    coords = ag.parameter(rng.uniform(0.1, 0.9, size=(2, 4, 2)))
    kp = LearnableKeypoints(coords)
    proj = ag.constant(rng.normal(size=(2, 8)))
    leaves = [coords] + list(params.values())
    return (lambda: ag.tsum(ag.mul(
        structural_embedding(kp, params, "emb", 4), proj))), leaves


def _sine_encode_check(rng):
    x = _leaf(rng, (7,), lo=-0.4, hi=1.4)
    proj = ag.constant(rng.normal(size=(7, 8)))
    return (lambda: ag.tsum(ag.mul(sine_encode(x, 8), proj))), [x]


def _grid_safe_locations(rng, shape, h, w):
    """Normalized locations whose pixel coordinates sit well inside cells."""
    cx = rng.integers(0, w, size=shape)
    cy = rng.integers(0, h, size=shape)
    fx = rng.uniform(0.1, 0.9, size=shape)
    fy = rng.uniform(0.1, 0.9, size=shape)
    x = (cx + fx) / w
    y = (cy + fy) / h
    return np.stack([x, y], axis=-1)


def _bilinear_check(rng):
    level = _leaf(rng, (5, 6, 3))
    locs = ag.parameter(_grid_safe_locations(rng, (4,), 5, 6))
    proj = ag.constant(rng.normal(size=(4, 3)))
    return (lambda: ag.tsum(ag.mul(bilinear_sample(level, locs), proj))), [level, locs]


def _sorted_keypoints(rng, nq, n_pose):
    corners = np.sort(rng.uniform(0.1, 0.9, size=(nq, 2, 2)), axis=1)
    # keep the corner pair clearly ordered: min/max resorting kinks otherwise
    corners[:, 1, :] = np.maximum(corners[:, 1, :], corners[:, 0, :] + 0.15)
    pose = rng.uniform(0.15, 0.85, size=(nq, n_pose, 2))
    return ag.parameter(np.concatenate([corners, pose], axis=1))


def _offsets_check(rng):
    params = {}
    seed = int(rng.integers(1 << 30))
    init_deform_attention(params, seed, "da", 8, heads=2, generated_per_head=3,
                          points_per_head=5, num_levels=2)
    coords = _sorted_keypoints(rng, 3, 2)
    kp = LearnableKeypoints(coords)
    q = _leaf(rng, (3, 8))
    proj = ag.constant(rng.normal(size=(3, 2, 3, 2)))
    leaves = [coords, q] + [params[k] for k in params if k.startswith("da.off")]
    return (lambda: ag.tsum(ag.mul(
        generate_offsets(q, kp, params, "da", 2, 3), proj))), leaves


def _deform_attention_check(rng):
    params = {}
    seed = int(rng.integers(1 << 30))
    init_deform_attention(params, seed, "da", 8, heads=2, generated_per_head=2,
                          points_per_head=4, num_levels=2)
    # non-uniform coefficients exercise the softmax path
    params["da.coef.w"] = _leaf(rng, params["da.coef.w"].shape, lo=-0.5, hi=0.5)
    coords = _sorted_keypoints(rng, 3, 2)
    kp = LearnableKeypoints(coords)
    q = _leaf(rng, (3, 8))
    levels = [_leaf(rng, (3, 4, 8)), _leaf(rng, (6, 8, 8))]
    pyramid = FeaturePyramid(levels)
    proj = ag.constant(rng.normal(size=(3, 8)))
    leaves = [coords, q] + levels + list(params.values())

    def f():
        plan = build_sampling_plan(kp, q, params, "da", heads=2, points_per_head=4,
                                   keypoint_per_head=2)
        return ag.tsum(ag.mul(deform_attn_keypoints(q, pyramid, plan, params,
                                                    "da", heads=2), proj))
    return f, leaves


def _heads_check(rng):
    params = {}
    seed = int(rng.integers(1 << 30))
    heads_mod.init_heads(params, seed, dim=8, n_points=4, n_pose=2,
                         variant="canonical-coords")
    for name in list(params):
        if name.endswith(".w") and not np.any(params[name].data):
            params[name] = _leaf(rng, params[name].shape, lo=-0.3, hi=0.3)
    coords = _sorted_keypoints(rng, 3, 2)
    kp = LearnableKeypoints(coords)
    emb = _leaf(rng, (3, 8))
    pixel = _leaf(rng, (2, 2, 8))
    proj_c = ag.constant(rng.normal(size=(3, 1)))
    proj_b = ag.constant(rng.normal(size=(3, 4)))
    proj_p = ag.constant(rng.normal(size=(3, 2, 2)))
    proj_m = ag.constant(rng.normal(size=(3, 2, 2)))
    leaves = [coords, emb, pixel] + list(params.values())

    def f():
        head_in = heads_mod.build_head_input(emb, kp, "canonical-coords", True)
        total = ag.tsum(ag.mul(heads_mod.class_head(head_in, params), proj_c))
        total = ag.add(total, ag.tsum(ag.mul(heads_mod.box_head(head_in, params), proj_b)))
        deltas, scales = heads_mod.pose_head(head_in, params, 2)
        total = ag.add(total, ag.tsum(ag.mul(deltas, proj_p)))
        total = ag.add(total, ag.tsum(ag.mul(scales, proj_p)))
        total = ag.add(total, ag.tsum(ag.mul(
            heads_mod.mask_head(head_in, pixel, params), proj_m)))
        return total
    return f, leaves


def _bce_check(rng):
    logits = _leaf(rng, (3, 4), lo=-2.0, hi=2.0)
    targets = (rng.uniform(size=(3, 4)) < 0.5).astype(np.float64)
    return (lambda: bce_loss(logits, targets)), [logits]


def _dice_check(rng):
    logits = _leaf(rng, (5, 5), lo=-2.0, hi=2.0)
    targets = (rng.uniform(size=(5, 5)) < 0.5).astype(np.float64)
    return (lambda: dice_loss(ag.sigmoid(logits), targets)), [logits]


def _nll_check(rng):
    pred = _leaf(rng, (4, 2))
    target = rng.normal(size=(4, 2))
    # keep |pred - target| away from the L1 kink
    target = target + np.where(pred.data > target, -0.3, 0.3)
    scale_raw = _leaf(rng, (4, 2), lo=-1.0, hi=1.0)
    return (lambda: regression_nll(pred, ag.softplus(scale_raw), target)), [pred, scale_raw]


def _tiny_config():
    return config_from_dict({
        "seed": 0,
        "data": {"image_size": 32, "n_pose": 5, "max_instances": 2,
                 "train_scenes": 1, "eval_scenes": 1},
        "model": {"hidden": 16, "heads": 2, "layers": 2, "queries": 4,
                  "sine_dim": 4, "feedforward": 32, "sample_points": 8,
                  "keypoint_quota": 4, "backbone_width": 4},
    })


def _full_model_check(rng):
    from .matching import encode_targets, hungarian_match, matching_cost, total_loss

    cfg = _tiny_config()
    cfg.seed = int(rng.integers(1 << 30))
    model = Model(cfg)
    scene = generate_scene(int(rng.integers(1 << 30)), cfg.scene_config())
    image = scene.image
    gt = encode_targets(scene.instances, cfg.model.canonical_space)
    # freeze the (piecewise-constant) assignment so f stays differentiable
    base = model.forward(image)
    assignment = hungarian_match(matching_cost(
        base.final.class_logits.data, base.mask_logits.data, gt, cfg.loss_weights()))
    leaves = list(model.params.values())

    def f():
        pred = model.forward(image)
        report = total_loss(pred.layers, pred.mask_logits, gt, assignment,
                            cfg.loss_weights(), cfg.loss.regression,
                            box_scale=model.box_scale())
        return report.total
    return f, leaves


CHECKS: list[tuple] = [
    ("add", _binary(ag.add)),
    ("sub", _binary(ag.sub)),
    ("mul", _binary(ag.mul)),
    ("div", _binary(ag.div)),
    ("minimum", _binary_kinked(ag.minimum)),
    ("maximum", _binary_kinked(ag.maximum)),
    ("neg", _unary(ag.neg)),
    ("relu", _unary(ag.relu, kinked=True)),
    ("sigmoid", _unary(ag.sigmoid)),
    ("exp", _unary(ag.exp)),
    ("log", _unary(ag.log, positive=True)),
    ("sqrt", _unary(ag.sqrt, positive=True)),
    ("abs", _unary(ag.absolute, kinked=True)),
    ("softplus", _unary(ag.softplus)),
    ("sin", _unary(ag.sin)),
    ("cos", _unary(ag.cos)),
    ("clamp", _clamp_interior),
    ("matmul", _matmul_2d),
    ("matmul-batched", _matmul_batched),
    ("softmax", _softmax_check),
    ("sum-mean", _reductions),
    ("reshape-transpose-concat-take", _movers),
    ("pad2d", _pad_check),
    ("layer-norm", _layer_norm_check),
    ("self-attention", _attention_check),
    ("conv2d", _conv_check),
    ("sine-encode", _sine_encode_check),
    ("structural-embedding", _sine_embedding_check),
    ("bilinear-sample", _bilinear_check),
    ("generate-offsets", _offsets_check),
    ("deformable-attention", _deform_attention_check),
    ("task-heads", _heads_check),
    ("bce-loss", _bce_check),
    ("dice-loss", _dice_check),
    ("regression-nll", _nll_check),
    ("full-model-loss", _full_model_check),
]


def run_gradient_checks(seed: int = 0, trials: int = DEFAULT_TRIALS,
                        log=print) -> dict:
    """Run every check; returns {name: max_rel_error} plus 'overall'."""
    results = {}
    overall = 0.0
    for name, builder in CHECKS:
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, zlib.crc32(name.encode()), trial]))
            worst = max(worst, directional_error(builder, rng))
        results[name] = worst
        overall = max(overall, worst)
        log(f"{name:32s} max rel err {worst:.3e}")
    results["overall"] = overall
    log(f"{'OVERALL':32s} max rel err {overall:.3e}")
    return results
