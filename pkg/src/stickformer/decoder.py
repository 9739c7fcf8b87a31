"""Decoder stack: self-attention, keypoint-guided deformable cross-attention,
feed-forward, with per-layer keypoint refinement and per-layer predictions.

Layer wiring (pre-norm residual convention):

    P   = structural_embedding(K)
    E1  = E + SelfAttn(q=k=LN1(E)+P, v=LN1(E))
    q   = P + LN2(E1)
    E2  = E1 + DeformAttnKey(q, pyramid, plan(K, q))
    E3  = E2 + FFN(LN3(E2))

then the class/box/pose heads read LN_head(E3) concatenated with the
current keypoint coordinates, and the box/pose deltas refine K.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import heads as heads_mod
from . import nn
from .attention import (FeaturePyramid, SamplingPlan, build_sampling_plan,
                        deform_attn_keypoints, init_deform_attention)
from .autograd import Tensor
from .keypoints import (LearnableKeypoints, assemble_keypoints, bbox_center_extent,
                        init_embedding_mlp, pose_to_image, refine_keypoints,
                        structural_embedding)


@dataclass
class DecoderConfig:
    num_queries: int = 20
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    sample_points: int = 32       # total sampling locations per query
    keypoint_quota: int = 16      # of which this many come from keypoints
    n_pose: int = 5
    canonical_space: bool = True
    feedforward: int = 256
    sine_dim: int = 8
    head_condition: str = "canonical-coords"
    num_levels: int = 3

    @property
    def n_points(self) -> int:
        """Keypoints per query: two box corners plus the pose joints."""
        return self.n_pose + 2

    @property
    def points_per_head(self) -> int:
        return self.sample_points // self.heads

    @property
    def keypoint_per_head(self) -> int:
        return self.keypoint_quota // self.heads

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError("decoder needs at least one layer")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.sample_points % self.heads:
            raise ValueError("sample_points must be divisible by heads")
        if self.keypoint_quota % self.heads:
            raise ValueError("keypoint_quota must be divisible by heads")
        if not 0 <= self.keypoint_quota <= self.sample_points:
            raise ValueError("keypoint_quota must be within [0, sample_points]")
        if self.sine_dim % 2:
            raise ValueError("sine_dim must be even")
        if self.n_pose < 1:
            raise ValueError("need at least one pose joint")
        if self.head_condition not in heads_mod.HEAD_CONDITION_VARIANTS:
            raise ValueError(f"unknown head_condition {self.head_condition!r}")


@dataclass
class LayerOutput:
    """Everything one decoder layer contributes to matching and losses."""

    embeddings: Tensor                 # [Q, D] residual stream after the layer
    keypoints: LearnableKeypoints      # refined K^l
    class_logits: Tensor               # [Q, 1]
    boxes: Tensor                      # [Q, 4] as (cx, cy, w, h), read off K^l
    joints: Tensor                     # [Q, n_pose, 2] image-normalized
    pose_coords: Tensor                # [Q, n_pose, 2] in the loss frame
    pose_scales: Tensor                # [Q, n_pose, 2] regression scales
    plan: SamplingPlan = field(repr=False, default=None)


def init_decoder_params(params: dict, seed: int, cfg: DecoderConfig) -> None:
    cfg.validate()
    d = cfg.hidden
    init_embedding_mlp(params, seed, "emb", cfg.n_points, cfg.sine_dim, d)
    for layer in range(cfg.num_layers):
        p = f"dec{layer}"
        nn.init_layer_norm(params, f"{p}.ln1", d)
        nn.init_self_attention(params, seed, f"{p}.sa", d)
        nn.init_layer_norm(params, f"{p}.ln2", d)
        init_deform_attention(params, seed, f"{p}.cross", d, cfg.heads,
                              cfg.points_per_head - cfg.keypoint_per_head,
                              cfg.points_per_head, num_levels=cfg.num_levels)
        nn.init_layer_norm(params, f"{p}.ln3", d)
        nn.init_linear(params, seed, f"{p}.ff1", d, cfg.feedforward)
        nn.init_linear(params, seed, f"{p}.ff2", cfg.feedforward, d)
    nn.init_layer_norm(params, "head_ln", d)
    heads_mod.init_heads(params, seed, d, cfg.n_points, cfg.n_pose, cfg.head_condition)


def init_query_params(params: dict, seed: int, cfg: DecoderConfig) -> None:
    """Learned initial decoder embeddings and keypoints.

    Box corners start uniform in [0, 1], stored in logit space so the
    optimizer can move them freely; pose joints start at the box center.
    """
    rng = nn.rng_for(seed, "query.k0")
    corners = rng.uniform(0.0, 1.0, size=(cfg.num_queries, 2, 2))
    corners = np.clip(np.sort(corners, axis=1), 1e-4, 1.0 - 1e-4)
    params["query.k0_box_logit"] = ag.parameter(np.log(corners / (1.0 - corners)))
    params["query.k0_pose"] = ag.parameter(
        np.full((cfg.num_queries, cfg.n_pose, 2), 0.5))
    params["query.e0"] = ag.parameter(
        nn.rng_for(seed, "query.e0").normal(0.0, 1.0, size=(cfg.num_queries, cfg.hidden)))


def initial_queries(params: dict, cfg: DecoderConfig) -> tuple[Tensor, LearnableKeypoints]:
    corners = ag.sigmoid(params["query.k0_box_logit"])
    kp = assemble_keypoints(corners, params["query.k0_pose"])
    return params["query.e0"], kp


def _layer_predictions(params: dict, cfg: DecoderConfig, embeddings: Tensor,
                       kp_in: LearnableKeypoints, structural: Tensor):
    """Heads on the current state; returns predictions and the refined K."""
    e_repr = nn.layer_norm(embeddings, params, "head_ln")
    head_in = heads_mod.build_head_input(e_repr, kp_in, cfg.head_condition,
                                         cfg.canonical_space, structural)
    logits = heads_mod.class_head(head_in, params)
    box_delta = heads_mod.box_head(head_in, params)
    pose_delta, pose_scales = heads_mod.pose_head(head_in, params, cfg.n_pose)
    kp_out = refine_keypoints(kp_in, box_delta, pose_delta)
    center, extent = bbox_center_extent(kp_out)
    boxes = ag.concat([center, extent], axis=1)
    joints = pose_to_image(kp_out, cfg.canonical_space)
    return logits, boxes, joints, kp_out, pose_scales


def decoder_layer(params: dict, cfg: DecoderConfig, layer: int, embeddings: Tensor,
                  kp: LearnableKeypoints, pyramid: FeaturePyramid) -> LayerOutput:
    p = f"dec{layer}"
    structural = structural_embedding(kp, params, "emb", cfg.sine_dim)

    t1 = nn.layer_norm(embeddings, params, f"{p}.ln1")
    qk = ag.add(t1, structural)
    attended = nn.self_attention(qk, qk, t1, params, f"{p}.sa", cfg.heads)
    e1 = ag.add(embeddings, attended)

    qvec = ag.add(structural, nn.layer_norm(e1, params, f"{p}.ln2"))
    plan = build_sampling_plan(kp, qvec, params, f"{p}.cross", cfg.heads,
                               cfg.points_per_head, cfg.keypoint_per_head,
                               cfg.canonical_space)
    cross = deform_attn_keypoints(qvec, pyramid, plan, params, f"{p}.cross", cfg.heads)
    e2 = ag.add(e1, cross)

    t3 = nn.layer_norm(e2, params, f"{p}.ln3")
    ff = nn.linear(ag.relu(nn.linear(t3, params, f"{p}.ff1")), params, f"{p}.ff2")
    e3 = ag.add(e2, ff)

    logits, boxes, joints, kp_out, pose_scales = _layer_predictions(
        params, cfg, e3, kp, structural)
    return LayerOutput(embeddings=e3, keypoints=kp_out, class_logits=logits,
                       boxes=boxes, joints=joints, pose_coords=kp_out.pose(),
                       pose_scales=pose_scales, plan=plan)


def run_decoder(params: dict, cfg: DecoderConfig, pyramid: FeaturePyramid,
                embeddings: Tensor, kp: LearnableKeypoints) -> list[LayerOutput]:
    """All decoder layers; one LayerOutput per layer, last one is final."""
    if pyramid.channels != cfg.hidden:
        raise ag.ShapeError(
            f"pyramid channels {pyramid.channels} != decoder hidden {cfg.hidden}")
    outputs = []
    for layer in range(cfg.num_layers):
        out = decoder_layer(params, cfg, layer, embeddings, kp, pyramid)
        embeddings, kp = out.embeddings, out.keypoints
        outputs.append(out)
    return outputs
