"""Stub feature extractor: a few strided convolutions standing in for a real
backbone + pixel decoder, trained jointly with everything else.

Produces the 1/32, 1/16, 1/8 feature pyramid the decoder attends over, plus
a 1/8-resolution per-pixel embedding map for the mask head.
"""

from __future__ import annotations

from . import autograd as ag
from . import nn
from .attention import FeaturePyramid
from .autograd import ShapeError, Tensor


def init_backbone(params: dict, seed: int, width: int, hidden: int) -> None:
    nn.init_conv(params, seed, "bb.c1", 3, width)
    nn.init_conv(params, seed, "bb.c2", width, 2 * width)
    nn.init_conv(params, seed, "bb.c3", 2 * width, hidden)
    nn.init_conv(params, seed, "bb.c4", hidden, hidden)
    nn.init_conv(params, seed, "bb.c5", hidden, hidden)
    nn.init_conv(params, seed, "bb.pix", hidden, hidden, k=1)


def stub_features(image: Tensor, params: dict) -> tuple[FeaturePyramid, Tensor]:
    """Image [H, W, 3] -> (pyramid at 1/32, 1/16, 1/8; pixel map at 1/8)."""
    h, w, _ = image.shape
    if h % 32 or w % 32:
        raise ShapeError(f"image dimensions must be divisible by 32, got {h}x{w}")
    x2 = ag.relu(nn.conv2d(image, params, "bb.c1", stride=2))
    x4 = ag.relu(nn.conv2d(x2, params, "bb.c2", stride=2))
    f8 = ag.relu(nn.conv2d(x4, params, "bb.c3", stride=2))
    f16 = ag.relu(nn.conv2d(f8, params, "bb.c4", stride=2))
    f32 = ag.relu(nn.conv2d(f16, params, "bb.c5", stride=2))
    pixel = nn.conv2d(f8, params, "bb.pix", stride=1, pad=0)
    return FeaturePyramid([f32, f16, f8]), pixel
