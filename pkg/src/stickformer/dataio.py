"""Dataset directory format, PPM images, and prediction overlays.

A dataset directory holds one JSON annotation per sample (boxes, joints,
seed), a raw little-endian float32 image blob, a raw uint8 mask blob, and a
``manifest.json`` listing ids and sha256 checksums of every blob. Import
verifies the checksums.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .scenes import Instance, SceneSample

MANIFEST_NAME = "manifest.json"


class DatasetError(ValueError):
    pass


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def export_dataset(scenes: list[SceneSample], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, scene in enumerate(scenes):
        sid = f"{i:05d}"
        size = scene.size
        ann = {
            "seed": scene.seed,
            "image_size": size,
            "instances": [
                {"box": inst.box.tolist(), "joints": inst.joints.tolist()}
                for inst in scene.instances
            ],
        }
        ann_bytes = json.dumps(ann, sort_keys=True).encode()
        image_bytes = scene.image.astype("<f4").tobytes()
        if scene.instances:
            mask_stack = np.stack([inst.mask for inst in scene.instances])
        else:
            mask_stack = np.zeros((0, size, size), dtype=bool)
        mask_bytes = mask_stack.astype(np.uint8).tobytes()

        files = {
            "annotation": f"{sid}.json",
            "image": f"{sid}.image.f32",
            "masks": f"{sid}.masks.u8",
        }
        (out / files["annotation"]).write_bytes(ann_bytes)
        (out / files["image"]).write_bytes(image_bytes)
        (out / files["masks"]).write_bytes(mask_bytes)
        samples.append({
            "id": sid,
            "seed": scene.seed,
            "files": files,
            "sha256": {
                "annotation": _sha256(ann_bytes),
                "image": _sha256(image_bytes),
                "masks": _sha256(mask_bytes),
            },
        })
    manifest = {"format_version": 1, "samples": samples}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_dataset(data_dir: str | Path) -> list[SceneSample]:
    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"{root}: missing {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != 1:
        raise DatasetError(f"{root}: unsupported dataset format")
    scenes = []
    for entry in manifest["samples"]:
        blobs = {}
        for kind, fname in entry["files"].items():
            data = (root / fname).read_bytes()
            if _sha256(data) != entry["sha256"][kind]:
                raise DatasetError(f"{root}/{fname}: checksum mismatch")
            blobs[kind] = data
        ann = json.loads(blobs["annotation"].decode())
        size = ann["image_size"]
        image = np.frombuffer(blobs["image"], dtype="<f4").reshape(size, size, 3)
        n_inst = len(ann["instances"])
        masks = np.frombuffer(blobs["masks"], dtype=np.uint8)
        masks = masks.reshape(n_inst, size, size).astype(bool)
        instances = [
            Instance(box=np.array(a["box"], dtype=np.float64),
                     joints=np.array(a["joints"], dtype=np.float64),
                     mask=masks[j])
            for j, a in enumerate(ann["instances"])
        ]
        scenes.append(SceneSample(image=image.astype(np.float64),
                                  instances=instances, seed=ann["seed"]))
    return scenes


# ---------------------------------------------------------------------------
# portable pixel map output and overlays


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an [H, W, 3] float image in [0, 1] as binary P6."""
    h, w, _ = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def _draw_box(img: np.ndarray, corners: np.ndarray, color) -> None:
    h, w, _ = img.shape
    x0, y0, x1, y1 = (np.clip(corners, 0.0, 1.0) * [w, h, w, h]).astype(int)
    x1 = min(max(x1, x0 + 1), w)
    y1 = min(max(y1, y0 + 1), h)
    img[y0:y1, x0, :] = color
    img[y0:y1, min(x1, w - 1), :] = color
    img[y0, x0:x1, :] = color
    img[min(y1, h - 1), x0:x1, :] = color


def _draw_points(img: np.ndarray, points: np.ndarray, color, radius: int = 1) -> None:
    h, w, _ = img.shape
    for x, y in points:
        cx = int(np.clip(x * w, 0, w - 1))
        cy = int(np.clip(y * h, 0, h - 1))
        img[max(cy - radius, 0):cy + radius + 1,
            max(cx - radius, 0):cx + radius + 1, :] = color


def _mask_contour(mask: np.ndarray) -> np.ndarray:
    """Boundary pixels: mask minus its 4-neighborhood erosion."""
    m = mask.astype(bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    return m & ~interior


def render_overlay(image: np.ndarray, prediction: dict, score_threshold: float) -> np.ndarray:
    """Predictions drawn over the input: boxes, joints, mask contours."""
    canvas = image.copy()
    h = canvas.shape[0]
    keep = np.where(prediction["scores"] >= score_threshold)[0]
    for q in keep:
        mask = prediction["masks"][q]
        up = np.repeat(np.repeat(mask, h // mask.shape[0], axis=0),
                       h // mask.shape[1], axis=1)
        canvas[_mask_contour(up)] = (0.25, 0.55, 1.0)
        _draw_box(canvas, prediction["corners"][q], (1.0, 0.35, 0.25))
        _draw_points(canvas, prediction["joints"][q], (0.3, 1.0, 0.35))
    return canvas
