"""Run configuration: nested dataclasses loaded from YAML with strict keys.

Every run artifact (reports, checkpoints) embeds the resolved config dict so
a run can be reproduced from any of its outputs. Unknown keys anywhere in
the file are an error; command-line overrides use dotted paths
(``optimizer.lr=3e-4``) and their values are parsed as YAML scalars.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .decoder import DecoderConfig
from .scenes import SceneConfig


class ConfigError(ValueError):
    """Malformed configuration: unknown keys, bad types, broken invariants."""


@dataclass
class RunSection:
    iterations: int = 2000
    batch_size: int = 2
    log_every: int = 10
    checkpoint_every: int = 1000


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    lr_decay: float = 0.1
    lr_milestones: list = field(default_factory=lambda: [0.8, 0.95])  # iteration fractions


@dataclass
class DataSection:
    image_size: int = 128
    min_instances: int = 1
    max_instances: int = 4
    n_pose: int = 5
    stroke_width: float = 3.0
    train_scenes: int = 16
    eval_scenes: int = 64
    train_dir: str = ""   # optional exported dataset directory
    eval_dir: str = ""
    augment: bool = False


@dataclass
class ModelSection:
    hidden: int = 64
    heads: int = 4
    layers: int = 4
    queries: int = 20
    sine_dim: int = 8
    feedforward: int = 256
    sample_points: int = 32
    keypoint_quota: int = 16
    canonical_space: bool = True
    head_condition: str = "canonical-coords"
    backbone_width: int = 16


@dataclass
class LossSection:
    lambda_class: float = 2.0
    lambda_mask: float = 5.0
    lambda_box: float = 0.2
    lambda_pose: float = 0.2
    regression: str = "laplace"  # or "l1"


@dataclass
class EvalSection:
    min_box_pixels: float = 0.0  # drop ground truths smaller than this many pixels
    oks_kappa: float = 0.1
    score_threshold: float = 0.5  # for overlays/prediction dumps only


@dataclass
class RunConfig:
    seed: int = 0
    run: RunSection = field(default_factory=RunSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def decoder_config(self) -> DecoderConfig:
        m = self.model
        return DecoderConfig(
            num_queries=m.queries, num_layers=m.layers, hidden=m.hidden,
            heads=m.heads, sample_points=m.sample_points,
            keypoint_quota=m.keypoint_quota, n_pose=self.data.n_pose,
            canonical_space=m.canonical_space, feedforward=m.feedforward,
            sine_dim=m.sine_dim, head_condition=m.head_condition)

    def scene_config(self) -> SceneConfig:
        d = self.data
        return SceneConfig(image_size=d.image_size, min_instances=d.min_instances,
                           max_instances=d.max_instances, n_pose=d.n_pose,
                           stroke_width=d.stroke_width)

    def loss_weights(self) -> dict:
        return {"class": self.loss.lambda_class, "mask": self.loss.lambda_mask,
                "box": self.loss.lambda_box, "pose": self.loss.lambda_pose}

    def validate(self) -> None:
        try:
            self.decoder_config().validate()
            self.scene_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.model.queries < self.data.max_instances:
            raise ConfigError("queries must cover the maximum instances per scene")
        if self.run.iterations < 1 or self.run.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.optimizer.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not all(0.0 < m <= 1.0 for m in self.optimizer.lr_milestones):
            raise ConfigError("lr_milestones must be fractions in (0, 1]")
        if self.loss.regression not in ("laplace", "l1"):
            raise ConfigError(f"unknown regression form {self.loss.regression!r}")
        if self.data.train_scenes < 1 or self.data.eval_scenes < 1:
            raise ConfigError("scene counts must be positive")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in _SECTION_TYPES and cls is RunConfig:
            kwargs[name] = _build(_SECTION_TYPES[name], value, sub)
        else:
            f = fields[name]
            default = (f.default if f.default is not dataclasses.MISSING
                       else f.default_factory())
            kwargs[name] = _coerce(value, type(default), sub)
    return cls(**kwargs)


_SECTION_TYPES = {
    "run": RunSection,
    "optimizer": OptimizerSection,
    "data": DataSection,
    "model": ModelSection,
    "loss": LossSection,
    "eval": EvalSection,
}


def _coerce(value, want: type, path: str):
    """Coerce YAML scalars to the declared field type.

    Handles YAML 1.1 quirks ("7e-4" without a dot parses as a string) and
    int-valued floats, and rejects anything that doesn't convert cleanly.
    """
    if isinstance(value, dict):
        raise ConfigError(f"{path}: unexpected nested mapping")
    if want is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    """Read YAML (or start from defaults), apply dotted-path overrides."""
    data: dict = {}
    if path:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[parts[-1]] = value
    return config_from_dict(data)
