"""Training loop: scene batches, matching, weighted loss, AdamW.

All randomness derives from the config seed through named substreams, so a
given (seed, config) pair reproduces the loss log bit-exactly on one
thread. The loss log is line-delimited JSON with deterministic fields only;
wall-clock timing goes into the returned summary, never into the log.
"""

from __future__ import annotations

import json
import time
import zlib
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tape
from .checkpoint import (load_checkpoint, optimizer_arrays, save_checkpoint,
                         split_arrays)
from .config import RunConfig, config_from_dict, config_to_dict
from .dataio import load_dataset
from .matching import encode_targets, hungarian_match, matching_cost, total_loss
from .model import Model
from .optim import AdamW
from .scenes import augment, generate_scene

TRAIN_STREAM = "train-scenes"
EVAL_STREAM = "eval-scenes"


class TrainingError(RuntimeError):
    pass


def _stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def scene_seeds(seed: int, stream: str, count: int) -> list[int]:
    rng = _stream_rng(seed, stream)
    return [int(s) for s in rng.integers(0, 2**31 - 1, size=count)]


def build_scenes(cfg: RunConfig, which: str) -> list:
    """Training or evaluation scenes, generated or loaded from a directory."""
    data = cfg.data
    directory = data.train_dir if which == "train" else data.eval_dir
    if directory:
        return load_dataset(directory)
    count = data.train_scenes if which == "train" else data.eval_scenes
    stream = TRAIN_STREAM if which == "train" else EVAL_STREAM
    scfg = cfg.scene_config()
    return [generate_scene(s, scfg) for s in scene_seeds(cfg.seed, stream, count)]


def scene_loss(model: Model, scene, cfg: RunConfig):
    """Forward one scene, match on the final layer, return the LossReport."""
    prediction = model.forward(scene.image)
    gt = encode_targets(scene.instances, cfg.model.canonical_space)
    if gt.count:
        cost = matching_cost(prediction.final.class_logits.data,
                             prediction.mask_logits.data, gt, cfg.loss_weights())
        assignment = hungarian_match(cost)
    else:
        assignment = np.zeros(0, dtype=np.int64)
    report = total_loss(prediction.layers, prediction.mask_logits, gt, assignment,
                        cfg.loss_weights(), cfg.loss.regression,
                        box_scale=model.box_scale())
    return report, prediction, assignment


def learning_rate_at(cfg: RunConfig, iteration: int) -> float:
    """Stepped decay: lr is multiplied by lr_decay at each milestone."""
    frac = iteration / cfg.run.iterations
    passed = sum(1 for m in cfg.optimizer.lr_milestones if frac >= m)
    return cfg.optimizer.lr * cfg.optimizer.lr_decay**passed


def _clip_gradients(params: dict, max_norm: float) -> None:
    total = 0.0
    with_grad = [p for p in params.values() if p.grad is not None]
    for p in with_grad:
        total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in with_grad:  # out of place: gradient arrays may alias
            p.grad = p.grad * scale


def run_training(cfg: RunConfig, out_dir: str | Path, log=print) -> dict:
    """Train per config, writing loss_log.jsonl and checkpoints to out_dir."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
    started = time.time()
    cpu_started = time.process_time()

    scenes = build_scenes(cfg, "train")
    model = Model(cfg)
    opt = AdamW(model.params, lr=cfg.optimizer.lr,
                betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
                eps=cfg.optimizer.eps, weight_decay=cfg.optimizer.weight_decay)
    batch_rng = _stream_rng(cfg.seed, "batching")
    aug_rng = _stream_rng(cfg.seed, "augment")

    log_path = out / "loss_log.jsonl"
    records = []
    first_loss = None
    last_loss = None
    with open(log_path, "w") as log_file:
        for it in range(cfg.run.iterations):
            opt.lr = learning_rate_at(cfg, it)
            idx = batch_rng.integers(0, len(scenes), size=cfg.run.batch_size)
            batch = [scenes[int(i)] for i in idx]
            if cfg.data.augment:
                batch = [augment(s, aug_rng, cfg.data.image_size) for s in batch]

            terms = {"class": 0.0, "mask": 0.0, "box": 0.0, "pose": 0.0}
            try:
                with Tape() as tape:
                    batch_total = None
                    for scene in batch:
                        report, _, _ = scene_loss(model, scene, cfg)
                        batch_total = (report.total if batch_total is None
                                       else ag.add(batch_total, report.total))
                        for key, value in report.component_totals().items():
                            terms[key] += value / len(batch)
                    loss = ag.mul(batch_total, ag.constant(1.0 / len(batch)))
                    loss_value = loss.item()
                    if not np.isfinite(loss_value):
                        raise TrainingError(f"non-finite loss at iteration {it}")
                    tape.backward(loss)
            except (NonFiniteError, ag.DomainError) as e:
                raise TrainingError(f"iteration {it}: {e}") from e
            if cfg.optimizer.grad_clip > 0:
                _clip_gradients(model.params, cfg.optimizer.grad_clip)
            try:
                opt.step()
            except NonFiniteError as e:
                raise TrainingError(str(e)) from e
            opt.zero_grad()

            if first_loss is None:
                first_loss = loss_value
            last_loss = loss_value
            if it % cfg.run.log_every == 0 or it == cfg.run.iterations - 1:
                record = {"iteration": it, "total": loss_value, **terms}
                log_file.write(json.dumps(record) + "\n")
                records.append(record)
                log(f"iter {it:5d}  loss {loss_value:.5f}")
            if cfg.run.checkpoint_every and (it + 1) % cfg.run.checkpoint_every == 0:
                _save(out / f"checkpoint_{it + 1:06d}.ckpt", model, opt, cfg, it + 1)

    final_path = out / "checkpoint_final.ckpt"
    _save(final_path, model, opt, cfg, cfg.run.iterations)
    return {
        "first_loss": first_loss,
        "last_loss": last_loss,
        "iterations": cfg.run.iterations,
        "wall_clock_sec": time.time() - started,
        "cpu_sec": time.process_time() - cpu_started,
        "loss_log": str(log_path),
        "checkpoint": str(final_path),
        "records": records,
    }


def _save(path: Path, model: Model, opt: AdamW, cfg: RunConfig, iteration: int) -> None:
    arrays = {name: p.data for name, p in model.params.items()}
    arrays.update(optimizer_arrays(opt))
    save_checkpoint(path, arrays, config_to_dict(cfg), iteration, opt.step_count)


def load_model(path: str | Path) -> tuple[Model, dict]:
    """Model restored from a checkpoint, plus the raw checkpoint record."""
    record = load_checkpoint(path)
    cfg = config_from_dict(record["config"])
    model = Model(cfg)
    params, _, _ = split_arrays(record["arrays"])
    model.load_arrays(params)
    return model, record


def restore_optimizer(model: Model, record: dict, cfg: RunConfig) -> AdamW:
    opt = AdamW(model.params, lr=cfg.optimizer.lr,
                betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
                eps=cfg.optimizer.eps, weight_decay=cfg.optimizer.weight_decay)
    _, m, v = split_arrays(record["arrays"])
    opt.load_state_dict({"step_count": record["step_count"], "m": m, "v": v})
    return opt
