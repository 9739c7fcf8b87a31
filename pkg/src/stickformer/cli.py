"""Command-line harness: generate-data, train, eval, infer, grad-check, ablate."""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bit-reproducible; must precede numpy import
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ablation import run_ablation
from .config import ConfigError, load_config
from .dataio import DatasetError, export_dataset, render_overlay, write_ppm
from .evaluate import evaluate_model, write_report
from .gradcheck import DEFAULT_TRIALS, run_gradient_checks
from .train import TrainingError, build_scenes, load_model, run_training


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", default=None, help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted-path override, e.g. optimizer.lr=3e-4")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stickformer",
        description="Desk-scale multi-task perception on stick-figure scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="export a scene dataset directory")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=None,
                   help="number of scenes (default: config data.train_scenes)")
    p.add_argument("--stream", choices=["train", "eval"], default="train")

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="metrics report path (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override eval/data settings")

    p = sub.add_parser("infer", help="write prediction overlays for scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--set", dest="overrides", action="append", default=[])

    p = sub.add_parser("grad-check", help="finite-difference gradient sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--threshold", type=float, default=1e-4)

    p = sub.add_parser("ablate", help="canonical-space and keypoint-quota sweeps")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--workers", type=int, default=1)
    return parser


def _config_with_checkpoint(path: str, overrides):
    from .config import config_from_dict
    from .checkpoint import load_checkpoint

    record = load_checkpoint(path)
    data = record["config"]
    if overrides:
        import yaml

        for item in overrides:
            dotted, raw = item.split("=", 1)
            node = data
            parts = dotted.strip().split(".")
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.count is not None:
        if args.stream == "train":
            cfg.data.train_scenes = args.count
        else:
            cfg.data.eval_scenes = args.count
    cfg.data.train_dir = ""
    cfg.data.eval_dir = ""
    scenes = build_scenes(cfg, args.stream)
    out = export_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    summary = run_training(cfg, args.out)
    print(f"final loss {summary['last_loss']:.5f} "
          f"(started at {summary['first_loss']:.5f}), "
          f"{summary['wall_clock_sec']:.1f}s")
    print(f"loss log: {summary['loss_log']}")
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    cfg = _config_with_checkpoint(args.checkpoint, args.overrides)
    scenes = build_scenes(cfg, "eval")
    report = evaluate_model(model, scenes, cfg)
    loss_log = Path(args.checkpoint).parent / "loss_log.jsonl"
    if loss_log.exists():
        report["loss_curve"] = [json.loads(line)
                                for line in loss_log.read_text().splitlines()]
    out = args.out or (Path(args.checkpoint).parent / "metrics.json")
    write_report(report, out)
    for task in ("box_ap", "mask_ap", "pose_ap"):
        values = "  ".join(f"@{k}: {v:.4f}" for k, v in sorted(report[task].items()))
        print(f"{task:8s} {values}")
    print(f"report: {out}")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_model(args.checkpoint)
    cfg = _config_with_checkpoint(args.checkpoint, args.overrides)
    cfg.data.eval_scenes = args.count
    scenes = build_scenes(cfg, "eval")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dumped = []
    for i, scene in enumerate(scenes):
        pred = model.predict(scene.image)
        overlay = render_overlay(scene.image, pred, cfg.eval.score_threshold)
        write_ppm(out / f"overlay_{i:04d}.ppm", overlay)
        keep = np.where(pred["scores"] >= cfg.eval.score_threshold)[0]
        dumped.append({
            "scene_seed": scene.seed,
            "detections": [
                {
                    "score": float(pred["scores"][q]),
                    "box_cxcywh": pred["boxes"][q].tolist(),
                    "corners": pred["corners"][q].tolist(),
                    "joints": pred["joints"][q].tolist(),
                    "mask": pred["masks"][q].astype(int).tolist(),
                }
                for q in keep
            ],
        })
    (out / "predictions.json").write_text(json.dumps(dumped, indent=1))
    print(f"wrote {len(scenes)} overlays and predictions.json to {out}")
    return 0


def cmd_grad_check(args) -> int:
    results = run_gradient_checks(seed=args.seed, trials=args.trials)
    if results["overall"] < args.threshold:
        print(f"PASS: max relative error {results['overall']:.3e} < {args.threshold:g}")
        return 0
    print(f"FAIL: max relative error {results['overall']:.3e} >= {args.threshold:g}")
    return 1


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    run_ablation(cfg, args.out, seeds=tuple(args.seeds), workers=args.workers)
    return 0


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
