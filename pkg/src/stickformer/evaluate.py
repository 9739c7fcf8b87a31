"""Evaluation: run the model over scenes and report AP per task."""

from __future__ import annotations

import json
import time
from pathlib import Path

from .config import RunConfig, config_to_dict
from .matching import downsample_mask
from .metrics import compute_ap
from .model import Model

AP_THRESHOLDS = (0.5, 0.75)


def collect_predictions(model: Model, scenes: list) -> tuple[list, list]:
    """Per-image prediction dicts and ground-truth dicts for compute_ap."""
    predictions = []
    ground_truths = []
    for scene in scenes:
        pred = model.predict(scene.image)
        per_image = []
        for q in range(pred["scores"].shape[0]):
            per_image.append({
                "score": pred["scores"][q],
                "corners": pred["corners"][q],
                "mask": pred["masks"][q],
                "joints": pred["joints"][q],
            })
        predictions.append(per_image)
        ground_truths.append([
            {
                "box": inst.box,
                "mask": downsample_mask(inst.mask, scene.size // pred["masks"].shape[1]) > 0,
                "joints": inst.joints,
            }
            for inst in scene.instances
        ])
    return predictions, ground_truths


def _filter_small(ground_truths: list, min_pixels: float, image_size: int) -> list:
    if min_pixels <= 0:
        return ground_truths
    min_area = min_pixels / (image_size * image_size)
    return [
        [g for g in gts
         if (g["box"][2] - g["box"][0]) * (g["box"][3] - g["box"][1]) >= min_area]
        for gts in ground_truths
    ]


def evaluate_model(model: Model, scenes: list, cfg: RunConfig) -> dict:
    """MetricsReport dict: per-task AP at 0.5/0.75 plus bookkeeping."""
    started = time.time()
    predictions, ground_truths = collect_predictions(model, scenes)
    ground_truths = _filter_small(ground_truths, cfg.eval.min_box_pixels,
                                  cfg.data.image_size)
    report = {"box_ap": {}, "mask_ap": {}, "pose_ap": {}}
    for thr in AP_THRESHOLDS:
        key = f"{thr:.2f}"
        report["box_ap"][key] = compute_ap(predictions, ground_truths, "box", thr)
        report["mask_ap"][key] = compute_ap(predictions, ground_truths, "mask", thr)
        report["pose_ap"][key] = compute_ap(predictions, ground_truths, "pose", thr,
                                            kappa=cfg.eval.oks_kappa)
    report["num_scenes"] = len(scenes)
    report["num_instances"] = sum(len(g) for g in ground_truths)
    report["wall_clock_sec"] = time.time() - started
    report["threads"] = 1
    report["config"] = config_to_dict(cfg)
    return report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True))
