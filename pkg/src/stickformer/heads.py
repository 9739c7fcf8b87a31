"""Task prediction heads conditioned on decoder embedding plus keypoints.

Every head reads the same conditional input: the (normalized) decoder
embedding concatenated with the query's keypoint coordinates — canonical
coordinates by default, with image-space coordinates and the structural
embedding available as configured variants. Classification is one linear
layer; box, pose and mask heads are three-layer perceptrons. Box and pose
heads emit refinement deltas; the mask head emits a per-query kernel whose
dot product with the per-pixel embedding map gives the mask logits.
"""

from __future__ import annotations

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .keypoints import LearnableKeypoints, flatten_coords, pose_to_image

HEAD_CONDITION_VARIANTS = ("canonical-coords", "image-coords", "keypoint-embedding")


def condition_width(variant: str, dim: int, n_points: int) -> int:
    if variant == "keypoint-embedding":
        return dim
    return 2 * n_points


def head_input_width(variant: str, dim: int, n_points: int) -> int:
    return dim + condition_width(variant, dim, n_points)


def build_head_input(embedding: Tensor, kp: LearnableKeypoints, variant: str,
                     canonical: bool, structural: Tensor | None = None) -> Tensor:
    """Concatenate the decoder embedding with the configured keypoint form."""
    if variant == "canonical-coords":
        cond = flatten_coords(kp)
    elif variant == "image-coords":
        q = kp.num_queries
        corners = ag.reshape(kp.bbox(), (q, 4))
        joints = ag.reshape(pose_to_image(kp, canonical), (q, 2 * kp.n_pose))
        cond = ag.concat([corners, joints], axis=1)
    elif variant == "keypoint-embedding":
        if structural is None:
            raise ValueError("keypoint-embedding variant needs the structural embedding")
        cond = structural
    else:
        raise ValueError(f"unknown head condition variant {variant!r}")
    return ag.concat([embedding, cond], axis=1)


def init_heads(params: dict, seed: int, dim: int, n_points: int, n_pose: int,
               variant: str) -> None:
    width = head_input_width(variant, dim, n_points)
    # negative class bias: most queries start as background
    nn.init_linear(params, seed, "head_class", width, 1, bias=-2.0)
    nn.init_mlp3(params, seed, "head_box", width, dim, 4, zero_last=True)
    nn.init_mlp3(params, seed, "head_pose", width, dim, 4 * n_pose, zero_last=True)
    nn.init_mlp3(params, seed, "head_mask", width, dim, dim)


def class_head(head_in: Tensor, params: dict) -> Tensor:
    """Human-vs-no-object logit per query, [Q, 1]."""
    return nn.linear(head_in, params, "head_class")


def box_head(head_in: Tensor, params: dict) -> Tensor:
    """Logit-space corner deltas, [Q, 4]."""
    return nn.mlp3(head_in, params, "head_box")


def pose_head(head_in: Tensor, params: dict, n_pose: int) -> tuple[Tensor, Tensor]:
    """Joint deltas and positive regression scales, each [Q, n_pose, 2]."""
    q = head_in.shape[0]
    raw = nn.mlp3(head_in, params, "head_pose")
    deltas = ag.reshape(raw[:, : 2 * n_pose], (q, n_pose, 2))
    scales = ag.softplus(ag.reshape(raw[:, 2 * n_pose :], (q, n_pose, 2)))
    return deltas, scales


def mask_head(head_in: Tensor, pixel_embed: Tensor, params: dict) -> Tensor:
    """Mask logits [Q, H8, W8]: per-pixel dot product with a query kernel."""
    h, w, d = pixel_embed.shape
    if params["head_mask.l3.w"].shape[1] != d:
        raise ag.ShapeError("mask head output width must match pixel embedding channels")
    kernel = nn.mlp3(head_in, params, "head_mask")  # [Q, D]
    pixels = ag.reshape(pixel_embed, (h * w, d))
    logits = ag.matmul(kernel, ag.transpose(pixels, (1, 0)))  # [Q, H*W]
    return ag.reshape(logits, (kernel.shape[0], h, w))
