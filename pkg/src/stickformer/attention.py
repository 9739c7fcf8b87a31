"""Multi-scale deformable cross-attention guided by query keypoints.

Per head, the sampling locations are a union of two subsets: locations read
directly off the query's keypoints (pose joints mapped to image space plus
the two box corners, dealt round-robin across heads) and locations generated
as MLP offsets around the box center, scaled by the box extent. Features are
sampled bilinearly from every pyramid level at the same normalized
locations, weighted by softmaxed per-head coefficients, concatenated across
heads and projected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import ShapeError, Tensor
from .keypoints import COORD_CLAMP, LearnableKeypoints, bbox_center_extent, pose_to_image


@dataclass
class FeaturePyramid:
    """Multi-resolution feature maps, coarse to fine, shared channel width."""

    levels: list  # of Tensor [H_s, W_s, D]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("feature pyramid needs at least one level")
        d = self.levels[0].shape[-1]
        prev = 0
        for lv in self.levels:
            if lv.ndim != 3 or lv.shape[-1] != d:
                raise ShapeError("pyramid levels must be [H, W, D] with shared D")
            if lv.shape[0] * lv.shape[1] <= prev:
                raise ShapeError("pyramid levels must strictly increase in resolution")
            prev = lv.shape[0] * lv.shape[1]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]


@dataclass
class SamplingPlan:
    """Resolved per-query, per-head sampling locations with provenance.

    ``locations`` is [Q, heads, points_per_head, 2] in normalized image
    coordinates; ``keypoint_mask`` marks which slots came from the query's
    keypoints rather than from generated offsets.
    """

    locations: Tensor
    keypoint_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.locations.ndim != 4 or self.locations.shape[-1] != 2:
            raise ShapeError(f"plan locations must be [Q, H, P, 2], got {self.locations.shape}")
        if self.keypoint_mask.shape != self.locations.shape[:-1]:
            raise ShapeError("provenance mask shape must match locations")


def bilinear_sample(level: Tensor, locations: Tensor) -> Tensor:
    """Bilinear interpolation of [H, W, C] features at normalized (x, y).

    Uses the align-corners-false convention: the center of pixel (row r,
    col c) sits at ((c+0.5)/W, (r+0.5)/H). Locations outside [0, 1] read a
    zero border. Differentiable in both the features and the locations;
    ``locations`` has shape [..., 2] and the output [..., C].

    Implemented as one fused op: the backward scatters the four corner
    weights into the feature grad and folds the weight derivatives into
    the location grad.
    """
    h, w, c = level.shape
    loc = locations.data
    u = loc[..., 0] * w - 0.5
    v = loc[..., 1] * h - 0.5
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = u - u0
    fv = v - v0

    flat = level.data.reshape(h * w, c)
    corners = []  # (feature values, effective weight, clipped flat row index)
    for dv in (0, 1):
        rows = v0 + dv
        row_ok = (rows >= 0) & (rows < h)
        rows_c = np.clip(rows, 0, h - 1)
        wv = fv if dv else 1.0 - fv
        for du in (0, 1):
            cols = u0 + du
            ok = row_ok & (cols >= 0) & (cols < w)
            cols_c = np.clip(cols, 0, w - 1)
            wu = fu if du else 1.0 - fu
            feats = flat[rows_c * w + cols_c] * ok[..., None]
            corners.append((feats, wu * wv * ok, rows_c * w + cols_c))
    out = sum(feats * weight[..., None] for feats, weight, _ in corners)

    def bw(g):
        g_level = None
        if level.requires_grad:
            chan = np.arange(c)
            idx_parts = []
            val_parts = []
            for _, weight, rows in corners:
                idx_parts.append((rows[..., None] * c + chan).ravel())
                val_parts.append((g * weight[..., None]).ravel())
            g_level = ag.scatter_add(h * w * c, np.concatenate(idx_parts),
                                     np.concatenate(val_parts)).reshape(h, w, c)
        g_loc = None
        if locations.requires_grad:
            dots = [np.sum(g * feats, axis=-1) for feats, _, _ in corners]
            d00, d10, d01, d11 = dots
            g_fu = (1.0 - fv) * (d10 - d00) + fv * (d11 - d01)
            g_fv = (1.0 - fu) * (d01 - d00) + fu * (d11 - d10)
            g_loc = np.stack([g_fu * w, g_fv * h], axis=-1)
        return g_level, g_loc

    return ag.custom_op(out, (level, locations), bw, "bilinear_sample")


def init_deform_attention(params: dict, seed: int, name: str, dim: int,
                          heads: int, generated_per_head: int,
                          points_per_head: int, num_levels: int) -> None:
    """Register offset MLP, coefficient layer, per-head value and output
    projections under ``name``."""
    if dim % heads:
        raise ShapeError(f"hidden dim {dim} not divisible by {heads} heads")
    hd = dim // heads
    if generated_per_head > 0:
        nn.init_linear(params, seed, f"{name}.off1", dim, dim)
        nn.init_linear(params, seed, f"{name}.off2", dim, heads * generated_per_head * 2,
                       zero=True)
        # break the symmetry between generated slots: zero weights would give
        # every slot in a head the same position and the same gradient forever
        k = np.arange(heads * generated_per_head)
        angles = 2.0 * np.pi * k / k.size
        radii = 0.2 * (1.0 + k % generated_per_head) / generated_per_head
        spread = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        params[f"{name}.off2.b"] = ag.parameter(spread.reshape(-1))
    # zero coefficients start every head at uniform attention
    nn.init_linear(params, seed, f"{name}.coef", dim, heads * points_per_head * num_levels,
                   zero=True)
    limit = np.sqrt(6.0 / (dim + hd))
    value = nn.rng_for(seed, f"{name}.value").uniform(-limit, limit, size=(heads, dim, hd))
    params[f"{name}.value"] = ag.parameter(value)
    nn.init_linear(params, seed, f"{name}.out", dim, dim)


def generate_offsets(query: Tensor, kp: LearnableKeypoints, params: dict, name: str,
                     heads: int, generated_per_head: int) -> Tensor:
    """Generated sampling locations around each box center, [Q, H, G, 2].

    Offsets come from a two-layer MLP over the query vector and are scaled
    componentwise by the box extent, so the spread adapts to instance size.
    """
    q = query.shape[0]
    center, extent = bbox_center_extent(kp)
    hidden = ag.relu(nn.linear(query, params, f"{name}.off1"))
    raw = nn.linear(hidden, params, f"{name}.off2")
    offsets = ag.reshape(raw, (q, heads, generated_per_head, 2))
    center_b = ag.reshape(center, (q, 1, 1, 2))
    extent_b = ag.reshape(extent, (q, 1, 1, 2))
    return ag.add(center_b, ag.mul(offsets, extent_b))


_POOL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _pool_take_indices(num_queries: int, pool_size: int, heads: int,
                       per_head: int) -> np.ndarray:
    """Flat indices selecting pool entries round-robin across heads.

    Head m takes pool entries m, m+heads, m+2*heads, ... cyclically, so a
    quota covering the whole pool uses the first ``heads*per_head`` entries
    and a larger quota repeats entries.
    """
    key = (num_queries, pool_size, heads, per_head)
    cached = _POOL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    slot = (np.arange(heads)[:, None] + np.arange(per_head)[None, :] * heads) % pool_size
    base = np.arange(num_queries)[:, None, None] * pool_size + slot[None]
    idx = base[..., None] * 2 + np.arange(2)
    _POOL_INDEX_CACHE[key] = idx
    return idx


def build_sampling_plan(kp: LearnableKeypoints, query: Tensor, params: dict, name: str,
                        heads: int, points_per_head: int, keypoint_per_head: int,
                        canonical: bool = True) -> SamplingPlan:
    """Union of keypoint-derived and generated sampling locations per head."""
    if keypoint_per_head > points_per_head:
        raise ShapeError("keypoint quota exceeds total sampling locations")
    nq = kp.num_queries
    generated_per_head = points_per_head - keypoint_per_head
    parts = []
    if keypoint_per_head > 0:
        joints = pose_to_image(kp, canonical)  # [Q, n_pose, 2]
        pool = ag.concat([joints, kp.bbox()], axis=1)  # joints first, then corners
        idx = _pool_take_indices(nq, pool.shape[1], heads, keypoint_per_head)
        parts.append(ag.take(pool, idx))
    if generated_per_head > 0:
        parts.append(generate_offsets(query, kp, params, name, heads, generated_per_head))
    locations = parts[0] if len(parts) == 1 else ag.concat(parts, axis=2)
    locations = ag.clamp(locations, *COORD_CLAMP)
    mask = np.zeros((nq, heads, points_per_head), dtype=bool)
    mask[:, :, :keypoint_per_head] = True
    return SamplingPlan(locations=locations, keypoint_mask=mask)


def deform_attn_keypoints(query: Tensor, pyramid: FeaturePyramid, plan: SamplingPlan,
                          params: dict, name: str, heads: int) -> Tensor:
    """Attention output [Q, D]: softmax-weighted multi-scale sampled values.

    Per head the value rows are stacked scale-major — all locations of the
    coarsest level first — and the coefficient layer follows the same
    layout, with one softmax over points*levels per head.
    """
    nq, dim = query.shape
    if dim % heads:
        raise ShapeError(f"hidden dim {dim} not divisible by {heads} heads")
    hd = dim // heads
    n_points = plan.locations.shape[2]
    n_levels = pyramid.num_levels

    w_value = params[f"{name}.value"]  # [heads, D, hd]
    per_level = []
    for level in pyramid.levels:
        feats = bilinear_sample(level, plan.locations)  # [Q, H, P, D]
        # channel projection commutes with bilinear sampling, so sampling the
        # raw map then projecting equals sampling the projected map
        flat = ag.reshape(ag.transpose(feats, (1, 0, 2, 3)), (heads, nq * n_points, dim))
        proj = ag.matmul(flat, w_value)  # [H, Q*P, hd]
        per_level.append(ag.reshape(proj, (heads, 1, nq, n_points, hd)))
    values = ag.concat(per_level, axis=1)  # [H, S, Q, P, hd]
    values = ag.reshape(ag.transpose(values, (2, 0, 1, 3, 4)),
                        (nq, heads, n_levels * n_points, hd))

    coef = nn.linear(query, params, f"{name}.coef")
    coef = ag.reshape(coef, (nq, heads, n_levels * n_points))
    attn = ag.softmax(coef, axis=-1)
    mixed = ag.matmul(ag.reshape(attn, (nq, heads, 1, n_levels * n_points)), values)
    merged = ag.reshape(mixed, (nq, dim))
    return nn.linear(merged, params, f"{name}.out")
