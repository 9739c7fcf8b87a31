"""Neural building blocks: linear layers, MLPs, layer norm, attention, conv.

Parameters are plain named tensors in a dict; initializers draw from
per-name RNG streams so that adding or removing one parameter never
shifts the values of the others.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-parameter stream, independent of creation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def xavier_uniform(seed: int, name: str, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng_for(seed, name).uniform(-limit, limit, size=(fan_in, fan_out))
    return ag.parameter(data)


def zeros_param(shape) -> Tensor:
    return ag.parameter(np.zeros(shape, dtype=np.float64))


def ones_param(shape) -> Tensor:
    return ag.parameter(np.ones(shape, dtype=np.float64))


def init_linear(params: dict, seed: int, name: str, d_in: int, d_out: int,
                zero: bool = False, bias: float = 0.0) -> None:
    """Register weight/bias pair ``name.w`` / ``name.b``."""
    if zero:
        params[f"{name}.w"] = zeros_param((d_in, d_out))
    else:
        params[f"{name}.w"] = xavier_uniform(seed, f"{name}.w", d_in, d_out)
    params[f"{name}.b"] = ag.parameter(np.full(d_out, bias, dtype=np.float64))


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return ag.add(ag.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def init_mlp3(params: dict, seed: int, name: str, d_in: int, d_hidden: int,
              d_out: int, zero_last: bool = False) -> None:
    init_linear(params, seed, f"{name}.l1", d_in, d_hidden)
    init_linear(params, seed, f"{name}.l2", d_hidden, d_hidden)
    init_linear(params, seed, f"{name}.l3", d_hidden, d_out, zero=zero_last)


def mlp3(x: Tensor, params: dict, name: str) -> Tensor:
    """Three-layer perceptron: ReLU(ReLU(x W1 + b1) W2 + b2) W3 + b3."""
    h = ag.relu(linear(x, params, f"{name}.l1"))
    h = ag.relu(linear(h, params, f"{name}.l2"))
    return linear(h, params, f"{name}.l3")


def init_layer_norm(params: dict, name: str, dim: int) -> None:
    params[f"{name}.gamma"] = ones_param(dim)
    params[f"{name}.beta"] = zeros_param(dim)


def layer_norm(x: Tensor, params: dict, name: str, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = ag.tmean(x, axis=-1, keepdims=True)
    centered = ag.sub(x, mu)
    var = ag.tmean(ag.mul(centered, centered), axis=-1, keepdims=True)
    normed = ag.div(centered, ag.sqrt(ag.add(var, ag.constant(eps))))
    return ag.add(ag.mul(normed, params[f"{name}.gamma"]), params[f"{name}.beta"])


def init_self_attention(params: dict, seed: int, name: str, dim: int) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, seed, f"{name}.{proj}", dim, dim)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [Q, D] -> [heads, Q, D/heads]
    q, d = x.shape
    return ag.transpose(ag.reshape(x, (q, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, q, hd = x.shape
    return ag.reshape(ag.transpose(x, (1, 0, 2)), (q, h * hd))


def self_attention(queries: Tensor, keys: Tensor, values: Tensor,
                   params: dict, name: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over a query set [Q, D]."""
    d = queries.shape[-1]
    if d % heads:
        raise ag.ShapeError(f"attention dim {d} not divisible by {heads} heads")
    qh = _split_heads(linear(queries, params, f"{name}.q"), heads)
    kh = _split_heads(linear(keys, params, f"{name}.k"), heads)
    vh = _split_heads(linear(values, params, f"{name}.v"), heads)
    scale = 1.0 / np.sqrt(d // heads)
    scores = ag.mul(ag.matmul(qh, ag.transpose(kh, (0, 2, 1))), ag.constant(scale))
    attn = ag.softmax(scores, axis=-1)
    mixed = _merge_heads(ag.matmul(attn, vh))
    return linear(mixed, params, f"{name}.o")


_CONV_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _conv_indices(h: int, w: int, c: int, k: int, stride: int, pad: int) -> np.ndarray:
    """Flat gather indices into the padded [H+2p, W+2p, C] volume."""
    key = (h, w, c, k, stride, pad)
    cached = _CONV_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * pad, w + 2 * pad
    out_h = (hp - k) // stride + 1
    out_w = (wp - k) // stride + 1
    r0 = np.arange(out_h) * stride
    c0 = np.arange(out_w) * stride
    kr, kc, ch = np.meshgrid(np.arange(k), np.arange(k), np.arange(c), indexing="ij")
    patch = (kr.ravel() * wp + kc.ravel()) * c + ch.ravel()  # [k*k*c]
    base = (r0[:, None] * wp + c0[None, :]).reshape(-1) * c  # [out_h*out_w]
    idx = base[:, None] + patch[None, :]
    _CONV_INDEX_CACHE[key] = idx
    return idx


def init_conv(params: dict, seed: int, name: str, c_in: int, c_out: int, k: int = 3) -> None:
    fan_in = k * k * c_in
    limit = np.sqrt(6.0 / (fan_in + c_out))
    data = rng_for(seed, f"{name}.w").uniform(-limit, limit, size=(fan_in, c_out))
    params[f"{name}.w"] = ag.parameter(data)
    # small positive bias keeps blank-background activations off the exact
    # ReLU kink (zero bias parks every background pixel on it)
    params[f"{name}.b"] = ag.parameter(np.full(c_out, 0.01))


def conv2d(x: Tensor, params: dict, name: str, stride: int = 1, pad: int = 1) -> Tensor:
    """2D convolution on channels-last [H, W, C] input via im2col."""
    h, w, c = x.shape
    weight = params[f"{name}.w"]
    k = int(np.sqrt(weight.shape[0] // c))
    if k * k * c != weight.shape[0]:
        raise ag.ShapeError(f"conv2d: weight rows {weight.shape[0]} not k*k*{c}")
    padded = ag.pad2d(x, pad) if pad else x
    idx = _conv_indices(h, w, c, k, stride, pad)
    cols = ag.take(padded, idx)  # [out_h*out_w, k*k*c]
    out = ag.add(ag.matmul(cols, weight), params[f"{name}.b"])
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    return ag.reshape(out, (out_h, out_w, weight.shape[1]))
