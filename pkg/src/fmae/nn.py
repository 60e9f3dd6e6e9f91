"""Transformer building blocks on top of :mod:`fmae.autograd`.

Parameters live in flat ``{name: Tensor}`` dicts; blocks look their weights
up by prefix. Weight matrices are stored ``(in, out)`` so that ``x @ W``
maps row-vector tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autograd import Tensor, gelu, layer_norm, matmul, softmax
from .errors import DimensionError

LN_EPS = 1e-6


@dataclass(frozen=True)
class AttentionParams:
    """View of one block's weights inside a flat parameter dict."""

    params: Mapping[str, Tensor]
    prefix: str
    heads: int

    def __getitem__(self, key: str) -> Tensor:
        return self.params[f"{self.prefix}.{key}"]

    @property
    def width(self) -> int:
        return self["q.W"].shape[0]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_linear(rng, shape_in: int, shape_out: int, prefix: str, dtype) -> dict:
    return {
        f"{prefix}.W": trunc_normal(rng, (shape_in, shape_out), dtype=dtype),
        f"{prefix}.b": np.zeros(shape_out, dtype=dtype),
    }


def init_layer_norm(width: int, prefix: str, dtype) -> dict:
    return {f"{prefix}.g": np.ones(width, dtype=dtype), f"{prefix}.b": np.zeros(width, dtype=dtype)}


def init_attention_block(rng, width: int, mlp_ratio: int, prefix: str, dtype) -> dict:
    p = {}
    p.update(init_layer_norm(width, f"{prefix}.ln1", dtype))
    for name in ("q", "k", "v", "o"):
        p.update(init_linear(rng, width, width, f"{prefix}.{name}", dtype))
    p.update(init_layer_norm(width, f"{prefix}.ln2", dtype))
    p.update(init_linear(rng, width, width * mlp_ratio, f"{prefix}.fc1", dtype))
    p.update(init_linear(rng, width * mlp_ratio, width, f"{prefix}.fc2", dtype))
    return p


def linear(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return matmul(x, params[f"{prefix}.W"]) + params[f"{prefix}.b"]


def multi_head_attention(x: Tensor, p: AttentionParams, return_weights: bool = False):
    """softmax(Q K^T / sqrt(dh)) V over the token axis, heads handled independently."""
    *lead, t, width = x.shape
    h = p.heads
    if width % h:
        raise DimensionError(f"width {width} not divisible by {h} heads")
    dh = width // h

    def split(z):
        return z.reshape(tuple(lead) + (t, h, dh)).transpose(_swap_tokens_heads(len(lead)))

    q = split(matmul(x, p["q.W"]) + p["q.b"])
    k = split(matmul(x, p["k.W"]) + p["k.b"])
    v = split(matmul(x, p["v.W"]) + p["v.b"])
    nl = len(lead)
    kt = k.transpose(tuple(range(nl + 1)) + (nl + 2, nl + 1))
    weights = softmax(matmul(q, kt) * (1.0 / math.sqrt(dh)))
    ctx = matmul(weights, v).transpose(_swap_tokens_heads(nl)).reshape(tuple(lead) + (t, width))
    out = matmul(ctx, p["o.W"]) + p["o.b"]
    if return_weights:
        return out, weights
    return out


def _swap_tokens_heads(nlead: int) -> tuple:
    base = tuple(range(nlead))
    return base + (nlead + 1, nlead, nlead + 2)


def attention_block(x: Tensor, p: AttentionParams, return_weights: bool = False):
    """Pre-norm transformer block: x + MHA(LN(x)), then h + MLP(LN(h))."""
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError("attention_block needs at least one token")
    y = layer_norm(x, p["ln1.g"], p["ln1.b"], LN_EPS)
    attn = multi_head_attention(y, p, return_weights)
    if return_weights:
        attn, weights = attn
    h = x + attn
    y = layer_norm(h, p["ln2.g"], p["ln2.b"], LN_EPS)
    y = gelu(matmul(y, p["fc1.W"]) + p["fc1.b"])
    out = h + matmul(y, p["fc2.W"]) + p["fc2.b"]
    if return_weights:
        return out, weights
    return out


def transformer_stack(x: Tensor, params: Mapping[str, Tensor], prefix: str, layers: int, heads: int) -> Tensor:
    for i in range(layers):
        x = attention_block(x, AttentionParams(params, f"{prefix}.{i}", heads))
    return layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"], LN_EPS)


def init_transformer_stack(rng, width: int, layers: int, mlp_ratio: int, prefix: str, dtype) -> dict:
    p = {}
    for i in range(layers):
        p.update(init_attention_block(rng, width, mlp_ratio, f"{prefix}.{i}", dtype))
    p.update(init_layer_norm(width, f"{prefix}.norm", dtype))
    return p
