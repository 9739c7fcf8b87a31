"""Procedural stick-figure scenes with exact analytic ground truth.

Figures are sampled as small skeletons (5-joint by default: head, hands,
feet; a 17-joint full-body topology is available), rendered as anti-aliased
line strokes. Instance masks are the figure's own stroke pixels after
occlusion — the frontmost figure owns overlapping pixels — and each box is
the tight bounding box of that mask under the same rasterization, so every
label is consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JOINT_MARGIN = 0.035


@dataclass
class SceneConfig:
    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 4
    n_pose: int = 5
    stroke_width: float = 3.0

    def validate(self) -> None:
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("instance count range is empty")
        if self.n_pose not in (5, 17):
            raise ValueError("supported skeletons have 5 or 17 joints")
        if self.stroke_width <= 0:
            raise ValueError("stroke_width must be positive")


@dataclass
class Instance:
    box: np.ndarray      # (x0, y0, x1, y1) normalized, tight on the mask
    joints: np.ndarray   # [n_pose, 2] normalized image coordinates
    mask: np.ndarray = field(repr=False)  # [H, W] bool, visible strokes only


@dataclass
class SceneSample:
    image: np.ndarray    # [H, W, 3] float in [0, 1]
    instances: list
    seed: int

    @property
    def size(self) -> int:
        return self.image.shape[0]


@dataclass
class _Figure:
    joints: np.ndarray        # [n_pose, 2] normalized
    segments: np.ndarray      # [S, 2, 2] normalized endpoints
    shade: float


def _sample_skeleton5(rng: np.random.Generator):
    height = rng.uniform(0.26, 0.5)
    center = rng.uniform(0.2, 0.8, size=2)
    tilt = rng.normal(0.0, 0.18)
    down = np.array([np.sin(tilt), np.cos(tilt)])
    perp = np.array([np.cos(tilt), -np.sin(tilt)])
    torso = 0.42 * height
    neck = center - down * torso * 0.5
    pelvis = center + down * torso * 0.5
    head = neck - down * 0.30 * height + perp * rng.normal(0.0, 0.02)

    def limb(origin, base_angle, spread, lo, hi):
        ang = base_angle + rng.uniform(-spread, spread)
        length = rng.uniform(lo, hi) * height
        return origin + length * np.array([np.cos(ang), np.sin(ang)])

    # y grows downward, so pi/2 points straight down
    hand_l = limb(neck, np.pi * 0.78, 0.5, 0.30, 0.46)
    hand_r = limb(neck, np.pi * 0.22, 0.5, 0.30, 0.46)
    foot_l = limb(pelvis, np.pi * 0.63, 0.28, 0.34, 0.5)
    foot_r = limb(pelvis, np.pi * 0.37, 0.28, 0.34, 0.5)
    joints = np.stack([head, hand_l, hand_r, foot_l, foot_r])
    segments = np.array([
        [head, neck], [neck, pelvis],
        [neck, hand_l], [neck, hand_r],
        [pelvis, foot_l], [pelvis, foot_r],
    ])
    return joints, segments


def _sample_skeleton17(rng: np.random.Generator):
    """COCO joint order: nose, eyes, ears, shoulders, elbows, wrists,
    hips, knees, ankles (left before right)."""
    height = rng.uniform(0.3, 0.55)
    center = rng.uniform(0.22, 0.78, size=2)
    tilt = rng.normal(0.0, 0.15)
    down = np.array([np.sin(tilt), np.cos(tilt)])
    perp = np.array([np.cos(tilt), -np.sin(tilt)])
    torso = 0.40 * height
    neck = center - down * torso * 0.5
    midhip = center + down * torso * 0.5
    head_c = neck - down * 0.16 * height

    nose = head_c + down * 0.03 * height + perp * rng.normal(0.0, 0.01)
    eye_l = head_c + perp * 0.030 * height - down * 0.015 * height
    eye_r = head_c - perp * 0.030 * height - down * 0.015 * height
    ear_l = head_c + perp * 0.055 * height
    ear_r = head_c - perp * 0.055 * height
    sho_l = neck + perp * 0.15 * height
    sho_r = neck - perp * 0.15 * height
    hip_l = midhip + perp * 0.09 * height
    hip_r = midhip - perp * 0.09 * height

    def chain(origin, base_angle, spread, l1, l2):
        a1 = base_angle + rng.uniform(-spread, spread)
        mid = origin + l1 * height * np.array([np.cos(a1), np.sin(a1)])
        a2 = a1 + rng.uniform(-spread, spread)
        end = mid + l2 * height * np.array([np.cos(a2), np.sin(a2)])
        return mid, end

    elb_l, wri_l = chain(sho_l, np.pi * 0.72, 0.4, 0.18, 0.18)
    elb_r, wri_r = chain(sho_r, np.pi * 0.28, 0.4, 0.18, 0.18)
    kne_l, ank_l = chain(hip_l, np.pi * 0.58, 0.22, 0.22, 0.22)
    kne_r, ank_r = chain(hip_r, np.pi * 0.42, 0.22, 0.22, 0.22)

    joints = np.stack([nose, eye_l, eye_r, ear_l, ear_r, sho_l, sho_r,
                       elb_l, elb_r, wri_l, wri_r, hip_l, hip_r,
                       kne_l, kne_r, ank_l, ank_r])
    segments = np.array([
        [nose, neck], [eye_l, nose], [eye_r, nose], [ear_l, eye_l], [ear_r, eye_r],
        [neck, midhip], [sho_l, neck], [sho_r, neck],
        [sho_l, elb_l], [elb_l, wri_l], [sho_r, elb_r], [elb_r, wri_r],
        [hip_l, midhip], [hip_r, midhip],
        [hip_l, kne_l], [kne_l, ank_l], [hip_r, kne_r], [kne_r, ank_r],
    ])
    return joints, segments


def _sample_figure(rng: np.random.Generator, n_pose: int) -> _Figure:
    sampler = _sample_skeleton5 if n_pose == 5 else _sample_skeleton17
    for _ in range(200):
        joints, segments = sampler(rng)
        if np.all(joints > JOINT_MARGIN) and np.all(joints < 1.0 - JOINT_MARGIN):
            return _Figure(joints=joints, segments=segments,
                           shade=rng.uniform(0.55, 1.0))
    raise RuntimeError("could not place a figure inside the image margins")


def _segment_distance_field(seg_px: np.ndarray, size: int) -> np.ndarray:
    """Distance from every pixel center to the segment, in pixels."""
    coords = np.arange(size) + 0.5
    px, py = np.meshgrid(coords, coords)  # [H, W], x and y
    a, b = seg_px[0], seg_px[1]
    ab = b - a
    denom = float(ab @ ab)
    dx = px - a[0]
    dy = py - a[1]
    if denom < 1e-12:
        return np.hypot(dx, dy)
    t = np.clip((dx * ab[0] + dy * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(dx - t * ab[0], dy - t * ab[1])


def _rasterize(fig: _Figure, size: int, stroke: float):
    """(anti-aliased coverage in [0,1], hard binary mask) for one figure."""
    half = stroke / 2.0
    dist = np.full((size, size), np.inf)
    for seg in fig.segments:
        dist = np.minimum(dist, _segment_distance_field(seg * size, size))
    alpha = np.clip(half + 0.5 - dist, 0.0, 1.0)
    return alpha, dist <= half


def tight_box(mask: np.ndarray) -> np.ndarray:
    """Pixel-boundary bounding box of a nonempty mask, normalized xyxy."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("tight_box of an empty mask")
    h, w = mask.shape
    return np.array([cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h])


def generate_scene(seed: int, cfg: SceneConfig) -> SceneSample:
    """Render one scene; a pure function of (seed, config)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    figures = [_sample_figure(rng, cfg.n_pose) for _ in range(count)]

    image = np.zeros((size, size, 3))
    owner = np.full((size, size), -1, dtype=np.int64)
    for k, fig in enumerate(figures):  # later figures draw in front
        alpha, hard = _rasterize(fig, size, cfg.stroke_width)
        image = image * (1.0 - alpha[..., None]) + fig.shade * alpha[..., None]
        owner[hard] = k

    instances = []
    for k, fig in enumerate(figures):
        mask = owner == k
        if not mask.any():  # fully occluded figures carry no labels
            continue
        instances.append(Instance(box=tight_box(mask), joints=fig.joints.copy(), mask=mask))
    return SceneSample(image=image, instances=instances, seed=seed)


# ---------------------------------------------------------------------------
# augmentation: random rescale + fixed-size crop with right/bottom padding


def _resample_nearest(arr: np.ndarray, scale: float, ox: int, oy: int, out: int) -> np.ndarray:
    h = arr.shape[0]
    scaled = max(1, int(np.floor(h * scale)))
    rows = np.floor((np.arange(out) + oy + 0.5) / scale).astype(np.int64)
    cols = np.floor((np.arange(out) + ox + 0.5) / scale).astype(np.int64)
    valid_r = (np.arange(out) + oy < scaled)
    valid_c = (np.arange(out) + ox < scaled)
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, h - 1)
    res = arr[np.ix_(rows, cols)]
    res[~valid_r, :] = 0
    res[:, ~valid_c] = 0
    return res


def _resample_image(img: np.ndarray, scale: float, ox: int, oy: int, out: int) -> np.ndarray:
    h = img.shape[0]
    scaled = max(1, int(np.floor(h * scale)))
    sx = (np.arange(out) + ox + 0.5) / scale - 0.5
    sy = (np.arange(out) + oy + 0.5) / scale - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    res = np.zeros((out, out, img.shape[2]))
    for dy in (0, 1):
        yy = np.clip(y0 + dy, 0, h - 1)
        wy = fy if dy else 1.0 - fy
        for dx in (0, 1):
            xx = np.clip(x0 + dx, 0, h - 1)
            wx = fx if dx else 1.0 - fx
            res += img[np.ix_(yy, xx)] * (wy[:, None] * wx[None, :])[..., None]
    pad_r = np.arange(out) + oy >= scaled
    pad_c = np.arange(out) + ox >= scaled
    res[pad_r, :, :] = 0.0
    res[:, pad_c, :] = 0.0
    return res


def apply_scale_crop(sample: SceneSample, scale: float, ox: int, oy: int,
                     out_size: int) -> SceneSample:
    """Deterministic core of ``augment``; exposed for direct testing."""
    image = _resample_image(sample.image, scale, ox, oy, out_size)
    in_size = sample.size
    instances = []
    for inst in sample.instances:
        mask = _resample_nearest(inst.mask.astype(np.uint8), scale, ox, oy, out_size) > 0
        if not mask.any():
            continue
        joints = (inst.joints * in_size * scale - np.array([ox, oy])) / out_size
        instances.append(Instance(box=tight_box(mask), joints=joints, mask=mask))
    return SceneSample(image=image, instances=instances, seed=sample.seed)


def augment(sample: SceneSample, rng: np.random.Generator,
            out_size: int | None = None) -> SceneSample:
    """Random scale in [0.1, 2.0], then a fixed-size crop; when the scaled
    image is smaller than the crop the right/bottom is zero-padded.
    Instances whose strokes leave the crop entirely are dropped."""
    out = sample.size if out_size is None else out_size
    scale = rng.uniform(0.1, 2.0)
    scaled = max(1, int(np.floor(sample.size * scale)))
    max_off = max(scaled - out, 0)
    ox = int(rng.integers(0, max_off + 1))
    oy = int(rng.integers(0, max_off + 1))
    return apply_scale_crop(sample, scale, ox, oy, out)
