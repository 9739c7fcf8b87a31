"""Evaluation metrics: box/mask IoU, object keypoint similarity, and AP.

AP follows the continuous (all-points) convention: predictions are ranked
by score, greedily matched one-to-one against ground truth at the given
similarity threshold, and the area under the monotone precision envelope
is integrated over recall.
"""

from __future__ import annotations

import numpy as np


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two (x0, y0, x1, y1) boxes."""
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    iw = max(ix1 - ix0, 0.0)
    ih = max(iy1 - iy0, 0.0)
    inter = iw * ih
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return np.logical_and(a, b).sum() / union


def oks(pred_joints: np.ndarray, gt_joints: np.ndarray, box_area: float,
        kappa: float = 0.1) -> float:
    """Mean over joints of exp(-d^2 / (2 * s^2 * kappa^2)) with s^2 = box area."""
    if pred_joints.shape != gt_joints.shape:
        raise ValueError(f"joint shape mismatch: {pred_joints.shape} vs {gt_joints.shape}")
    d2 = np.sum((pred_joints - gt_joints) ** 2, axis=-1)
    s2 = max(box_area, 1e-12)
    return float(np.mean(np.exp(-d2 / (2.0 * s2 * kappa * kappa))))


def average_precision(flags: np.ndarray, num_gt: int) -> float:
    """AP from per-prediction TP flags already sorted by descending score."""
    if num_gt == 0:
        return 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags.astype(np.float64))
    fp = np.cumsum((~flags.astype(bool)).astype(np.float64))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _similarity(pred: dict, gt: dict, task: str, kappa: float) -> float:
    if task == "box":
        return box_iou(pred["corners"], gt["box"])
    if task == "mask":
        return mask_iou(pred["mask"], gt["mask"])
    if task == "pose":
        area = max(gt["box"][2] - gt["box"][0], 0.0) * max(gt["box"][3] - gt["box"][1], 0.0)
        return oks(pred["joints"], gt["joints"], area, kappa)
    raise ValueError(f"unknown task {task!r}")


def compute_ap(predictions: list, ground_truths: list, task: str,
               threshold: float, kappa: float = 0.1) -> float:
    """AP over a whole evaluation set.

    ``predictions``: per image, a list of dicts with ``score`` plus the
    task payloads (``corners``, ``mask``, ``joints``). ``ground_truths``:
    per image, a list of dicts with ``box``, ``mask``, ``joints``.
    Score-ranked predictions greedily claim the most similar unmatched
    ground truth; similarity below the threshold makes a false positive.
    """
    entries = []
    for img_idx, preds in enumerate(predictions):
        for pred_idx, p in enumerate(preds):
            entries.append((-float(p["score"]), img_idx, pred_idx, p))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))

    num_gt = sum(len(g) for g in ground_truths)
    taken = [np.zeros(len(g), dtype=bool) for g in ground_truths]
    flags = np.zeros(len(entries), dtype=bool)
    for rank, (_, img_idx, _, pred) in enumerate(entries):
        gts = ground_truths[img_idx]
        best_sim = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if taken[img_idx][j]:
                continue
            sim = _similarity(pred, gt, task, kappa)
            if sim > best_sim:
                best_sim = sim
                best_j = j
        if best_j >= 0 and best_sim >= threshold:
            taken[img_idx][best_j] = True
            flags[rank] = True
    return average_precision(flags, num_gt)
