"""Full network: stub backbone, decoder stack, and the final mask head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import heads as heads_mod
from . import nn
from .autograd import Tensor
from .backbone import init_backbone, stub_features
from .config import RunConfig
from .decoder import (LayerOutput, init_decoder_params, init_query_params,
                      initial_queries, run_decoder)
from .keypoints import structural_embedding


@dataclass
class Prediction:
    """One forward pass: per-layer decoder outputs plus final masks."""

    layers: list                     # of LayerOutput
    mask_logits: Tensor              # [Q, H/8, W/8]
    pixel_embed: Tensor = field(repr=False, default=None)

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


class Model:
    """Owns the named parameter dict and the forward wiring."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.decoder_cfg = cfg.decoder_config()
        params: dict[str, Tensor] = {}
        init_backbone(params, cfg.seed, cfg.model.backbone_width, cfg.model.hidden)
        init_decoder_params(params, cfg.seed, self.decoder_cfg)
        init_query_params(params, cfg.seed, self.decoder_cfg)
        if cfg.loss.regression == "laplace":
            # learned global corner-regression scale, softplus(raw) = 0.5 at init
            from .matching import BOX_NLL_SCALE

            raw = np.full(4, np.log(np.expm1(BOX_NLL_SCALE)))
            params["loss.box_scale_raw"] = ag.parameter(raw)
        self.params = params

    def box_scale(self) -> Tensor | None:
        raw = self.params.get("loss.box_scale_raw")
        return None if raw is None else ag.softplus(raw)

    def forward(self, image: np.ndarray) -> Prediction:
        dcfg = self.decoder_cfg
        pyramid, pixel = stub_features(ag.constant(image), self.params)
        embeddings, kp = initial_queries(self.params, dcfg)
        layers = run_decoder(self.params, dcfg, pyramid, embeddings, kp)

        final = layers[-1]
        e_repr = nn.layer_norm(final.embeddings, self.params, "head_ln")
        structural = structural_embedding(final.keypoints, self.params, "emb",
                                          dcfg.sine_dim)
        head_in = heads_mod.build_head_input(e_repr, final.keypoints,
                                             dcfg.head_condition,
                                             dcfg.canonical_space, structural)
        mask_logits = heads_mod.mask_head(head_in, pixel, self.params)
        return Prediction(layers=layers, mask_logits=mask_logits, pixel_embed=pixel)

    def predict(self, image: np.ndarray) -> dict:
        """Inference-side numpy view of the final-layer predictions."""
        pred = self.forward(image)
        final = pred.final
        scores = 1.0 / (1.0 + np.exp(-final.class_logits.data.reshape(-1)))
        corners = final.keypoints.bbox().data.reshape(-1, 4)
        return {
            "scores": scores,
            "boxes": final.boxes.data.copy(),          # (cx, cy, w, h)
            "corners": corners.copy(),                 # (x0, y0, x1, y1)
            "joints": final.joints.data.copy(),
            "mask_logits": pred.mask_logits.data.copy(),
            "masks": pred.mask_logits.data > 0.0,
        }

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)[:3]}..., "
                           f"extra {sorted(extra)[:3]}...")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(arr)
