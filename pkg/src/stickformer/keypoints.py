"""Query-side keypoint geometry.

Each query carries 2(n+1) learnable coordinates: two bounding-box corners
(left-top p0, right-bottom p1) followed by n-1 pose joints expressed in the
canonical frame of that box. ``pose_to_image`` maps the canonical joints to
image-normalized coordinates via p0 + p * diag(d); ``image_to_pose`` inverts
the map for ground-truth encoding. The structural embedding turns the
coordinates into a positional vector through a sine encoding and a
three-layer MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor

EXTENT_EPS = 1e-6
COORD_CLAMP = (-0.5, 1.5)
SINE_TEMPERATURE = 20.0


class GeometryError(ValueError):
    """Degenerate geometry: zero-extent boxes and friends."""


@dataclass
class LearnableKeypoints:
    """Per-query keypoint block: indices 0,1 are the box corners, 2..n the pose."""

    coords: Tensor  # [Q, n+1, 2]

    @property
    def num_queries(self) -> int:
        return self.coords.shape[0]

    @property
    def n_points(self) -> int:
        return self.coords.shape[1]

    @property
    def n_pose(self) -> int:
        return self.coords.shape[1] - 2

    def bbox(self) -> Tensor:
        return self.coords[:, :2, :]

    def pose(self) -> Tensor:
        return self.coords[:, 2:, :]

    def validate(self) -> None:
        if self.coords.ndim != 3 or self.coords.shape[2] != 2 or self.coords.shape[1] < 2:
            raise GeometryError(f"keypoints need shape [Q, n+1, 2], got {self.coords.shape}")
        data = self.coords.data
        if not np.all(np.isfinite(data)):
            raise GeometryError("keypoints contain non-finite coordinates")
        if np.any(data[:, 0, :] > data[:, 1, :] + 1e-12):
            raise GeometryError("box corners out of order: p0 must be <= p1")


def bbox_center_extent(kp: LearnableKeypoints) -> tuple[Tensor, Tensor]:
    """Box center p_c = (p0+p1)/2 and side lengths d = p1-p0, each [Q, 2]."""
    p0 = kp.coords[:, 0, :]
    p1 = kp.coords[:, 1, :]
    center = ag.mul(ag.add(p0, p1), ag.constant(0.5))
    extent = ag.sub(p1, p0)
    return center, extent


def pose_to_image(kp: LearnableKeypoints, canonical: bool = True) -> Tensor:
    """Joint coordinates in image-normalized units, [Q, n_pose, 2].

    In canonical mode each joint p is mapped through its box: p0 + p*d.
    With canonical off the stored pose part already lives in image space.
    """
    pose = kp.pose()
    if not canonical:
        return pose
    p0 = kp.coords[:, 0:1, :]
    p1 = kp.coords[:, 1:2, :]
    extent = ag.sub(p1, p0)
    return ag.add(p0, ag.mul(pose, extent))


def image_to_pose(joints: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Encode image-space joints into box-canonical coordinates.

    joints: [..., n, 2]; boxes: [..., 4] as (x0, y0, x1, y1). Inverse of
    ``pose_to_image``. Rejects boxes with any extent below ``EXTENT_EPS``.
    """
    joints = np.asarray(joints, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    p0 = boxes[..., None, 0:2]
    p1 = boxes[..., None, 2:4]
    extent = p1 - p0
    if np.any(extent < EXTENT_EPS):
        raise GeometryError(f"degenerate box: extent below {EXTENT_EPS}")
    return (joints - p0) / extent


def sine_encode(k: Tensor, d_prime: int) -> Tensor:
    """Map each scalar coordinate to an interleaved sin/cos feature vector.

    Input [...]; output [..., d_prime]. Pair j uses angular frequency
    2*pi / T^(2j/d_prime) with T = 20, so k=0 encodes to [0, 1, 0, 1, ...].
    """
    if d_prime % 2:
        raise ValueError(f"sine dimension must be even, got {d_prime}")
    pairs = d_prime // 2
    freqs = 2.0 * np.pi / SINE_TEMPERATURE ** (2.0 * np.arange(pairs) / d_prime)
    angles = ag.mul(ag.reshape(k, k.shape + (1,)), ag.constant(freqs))
    interleaved = ag.stack([ag.sin(angles), ag.cos(angles)], axis=angles.ndim)
    return ag.reshape(interleaved, k.shape + (d_prime,))


def flatten_coords(kp: LearnableKeypoints) -> Tensor:
    """[Q, n+1, 2] -> [Q, 2(n+1)] in x0, y0, x1, y1, ... order."""
    q, n1, _ = kp.coords.shape
    return ag.reshape(kp.coords, (q, 2 * n1))


def init_embedding_mlp(params: dict, seed: int, name: str, n_points: int,
                       d_prime: int, dim: int) -> None:
    nn.init_mlp3(params, seed, name, 2 * n_points * d_prime, dim, dim)


def structural_embedding(kp: LearnableKeypoints, params: dict, name: str,
                         d_prime: int) -> Tensor:
    """Positional/structural vector per query: MLP over sine-encoded coords."""
    q, n1, _ = kp.coords.shape
    encoded = sine_encode(flatten_coords(kp), d_prime)  # [Q, 2(n+1), D']
    flat = ag.reshape(encoded, (q, 2 * n1 * d_prime))
    return nn.mlp3(flat, params, name)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Logit of x after clamping into (eps, 1-eps)."""
    xc = ag.clamp(x, eps, 1.0 - eps)
    return ag.log(ag.div(xc, ag.sub(ag.constant(1.0), xc)))


def assemble_keypoints(bbox_corners: Tensor, pose: Tensor) -> LearnableKeypoints:
    """Build a valid keypoint block: sort corners, clamp the pose part."""
    p0 = ag.minimum(bbox_corners[:, 0:1, :], bbox_corners[:, 1:2, :])
    p1 = ag.maximum(bbox_corners[:, 1:2, :], bbox_corners[:, 0:1, :])
    pose = ag.clamp(pose, *COORD_CLAMP)
    return LearnableKeypoints(ag.concat([p0, p1, pose], axis=1))


def refine_keypoints(kp: LearnableKeypoints, box_delta: Tensor,
                     pose_delta: Tensor) -> LearnableKeypoints:
    """Per-layer additive refinement.

    Box corners move in logit space (sigmoid(logit(p) + delta)), the pose
    part moves additively in its own frame; corners are re-sorted and the
    pose clamped afterwards so the keypoint invariants survive any delta.
    """
    q = kp.num_queries
    corners = ag.sigmoid(
        ag.add(inverse_sigmoid(kp.bbox()), ag.reshape(box_delta, (q, 2, 2)))
    )
    pose = ag.add(kp.pose(), pose_delta)
    return assemble_keypoints(corners, pose)
