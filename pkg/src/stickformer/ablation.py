"""Ablation harness: canonical-vs-image pose frame, keypoint quota sweep.

Both comparisons train the same schedule on the same scene sets over a few
seeds and compare median held-out pose AP. The quota comparison also runs a
step-0 sanity check: with everything else pinned, quota 16 and quota 0 must
differ in the sampling plan's provenance masks and in nothing else.
"""

from __future__ import annotations

import copy
import json
import multiprocessing
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict, config_to_dict
from .evaluate import evaluate_model
from .model import Model
from .train import build_scenes, run_training

VARIANTS = ("canonical-quota", "image-space", "quota-zero")


def _variant_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    cfg = config_from_dict(copy.deepcopy(config_to_dict(base)))
    cfg.seed = seed
    if variant == "image-space":
        cfg.model.canonical_space = False
    elif variant == "quota-zero":
        cfg.model.keypoint_quota = 0
    elif variant != "canonical-quota":
        raise ValueError(f"unknown variant {variant!r}")
    return cfg


def step0_provenance_check(base: RunConfig) -> dict:
    """Quota 16 vs 0 at initialization: same everything, different plans."""
    cfg_a = _variant_config(base, "canonical-quota", base.seed)
    cfg_b = _variant_config(base, "quota-zero", base.seed)

    dict_a = config_to_dict(cfg_a)
    dict_b = config_to_dict(cfg_b)
    diffs = []
    for section, content in dict_a.items():
        if isinstance(content, dict):
            for key, value in content.items():
                if dict_b[section][key] != value:
                    diffs.append(f"{section}.{key}")
        elif dict_b[section] != content:
            diffs.append(section)
    if diffs != ["model.keypoint_quota"]:
        raise AssertionError(f"configs differ beyond the quota knob: {diffs}")

    model_a = Model(cfg_a)
    model_b = Model(cfg_b)
    shared_equal = True
    compared = 0
    for name, pa in model_a.params.items():
        pb = model_b.params.get(name)
        if pb is None or pb.data.shape != pa.data.shape:
            continue  # offset-MLP widths legitimately differ with the quota
        compared += 1
        if not np.array_equal(pa.data, pb.data):
            shared_equal = False
    scene = build_scenes(cfg_a, "train")[0]
    pred_a = model_a.forward(scene.image)
    pred_b = model_b.forward(scene.image)
    kp_slots_a = int(pred_a.layers[0].plan.keypoint_mask.sum())
    kp_slots_b = int(pred_b.layers[0].plan.keypoint_mask.sum())
    result = {
        "config_diffs": diffs,
        "shared_params_identical": shared_equal,
        "shared_params_compared": compared,
        "keypoint_slots_quota": kp_slots_a,
        "keypoint_slots_zero": kp_slots_b,
        "provenance_differs": kp_slots_a != kp_slots_b and kp_slots_b == 0,
    }
    if not (result["provenance_differs"] and shared_equal):
        raise AssertionError(f"step-0 check failed: {result}")
    return result


def _run_one(args) -> dict:
    variant, seed, base_dict, out_dir = args
    base = config_from_dict(base_dict)
    cfg = _variant_config(base, variant, seed)
    run_dir = Path(out_dir) / f"{variant}-seed{seed}"
    summary = run_training(cfg, run_dir, log=lambda *_: None)
    from .train import load_model  # local import keeps workers lean

    model, _ = load_model(summary["checkpoint"])
    eval_scenes = build_scenes(cfg, "eval")
    report = evaluate_model(model, eval_scenes, cfg)
    return {
        "variant": variant,
        "seed": seed,
        "pose_ap_050": report["pose_ap"]["0.50"],
        "box_ap_050": report["box_ap"]["0.50"],
        "mask_ap_050": report["mask_ap"]["0.50"],
        "final_loss": summary["last_loss"],
    }


def run_ablation(base: RunConfig, out_dir: str | Path, seeds=(0, 1, 2),
                 workers: int = 1, log=print) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    step0 = step0_provenance_check(base)
    log("step-0 provenance check passed: "
        f"{step0['keypoint_slots_quota']} keypoint slots vs "
        f"{step0['keypoint_slots_zero']}, shared params identical")

    base_dict = config_to_dict(base)
    jobs = [(variant, seed, base_dict, str(out))
            for variant in VARIANTS for seed in seeds]
    if workers > 1:
        # fork keeps workers usable from any entry point; BLAS threads are
        # pinned to one, so forking a numpy process is safe here
        method = "fork" if "fork" in multiprocessing.get_all_start_methods() else "spawn"
        with multiprocessing.get_context(method).Pool(workers) as pool:
            rows = pool.map(_run_one, jobs)
    else:
        rows = [_run_one(job) for job in jobs]

    by_variant = {v: sorted(r["pose_ap_050"] for r in rows if r["variant"] == v)
                  for v in VARIANTS}
    medians = {v: float(np.median(vals)) for v, vals in by_variant.items()}
    report = {
        "step0": step0,
        "runs": rows,
        "median_pose_ap": medians,
        "canonical_beats_image": medians["canonical-quota"] >= medians["image-space"],
        "quota_beats_zero": medians["canonical-quota"] >= medians["quota-zero"],
        "seeds": list(seeds),
        "wall_clock_sec": time.time() - started,
        "config": base_dict,
    }
    (out / "ablation_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))

    log("")
    log(f"{'variant':18s} {'median pose AP@0.5':>20s}")
    for v in VARIANTS:
        log(f"{v:18s} {medians[v]:>20.4f}")
    log("")
    log(f"canonical >= image-space: {report['canonical_beats_image']}")
    log(f"quota 16 >= quota 0:      {report['quota_beats_zero']}")
    return report
