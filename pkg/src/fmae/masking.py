"""Patchify, channel/patch mask sampling and the patch embedding.

Array conventions (``B`` groups, ``n`` snippets per group):

* snippet values ``(B, n, l, c)``; patches ``(B, n, s, l0, c)``
* ``hidden`` ``(B, n, c)``: True where a channel is masked or absent
* ``patch_mask`` ``(B, n, s)``: True where a patch is masked
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autograd import Tensor, concat, matmul, take_rows
from .errors import ContractError, DimensionError
from .types import MaskPlan, Snippet, SnippetGroup


def patchify(x, s: int) -> np.ndarray:
    """Split the length axis of ``(..., l, c)`` into ``s`` contiguous patches.

    Accepts a :class:`Snippet` or an array; returns ``(..., s, l/s, c)``.
    """
    values = x.values if isinstance(x, Snippet) else np.asarray(x)
    l, c = values.shape[-2:]
    if s < 1 or l % s:
        raise ContractError(f"snippet length {l} is not divisible by s={s}")
    return values.reshape(values.shape[:-2] + (s, l // s, c))


def unpatchify(patches: np.ndarray) -> np.ndarray:
    s, l0, c = patches.shape[-3:]
    return patches.reshape(patches.shape[:-3] + (s * l0, c))


def sample_channel_mask(c: int, p_channel: float, rng: np.random.Generator):
    """Draw ``floor(c * p)`` channels uniformly without replacement.

    Returns the set and its boolean indicator vector.
    """
    if not 0 <= p_channel < 1:
        raise ContractError("p_channel must lie in [0, 1)")
    k = math.floor(c * p_channel)
    chosen = rng.choice(c, size=k, replace=False) if k else np.empty(0, dtype=int)
    v = np.zeros(c, dtype=bool)
    v[chosen] = True
    return frozenset(int(i) for i in chosen), v


def sample_patch_masks(n: int, s: int, p_patch: float, rng: np.random.Generator) -> list:
    if not 0 <= p_patch < 1:
        raise ContractError("p_patch must lie in [0, 1)")
    k = math.floor(s * p_patch)
    return [frozenset(int(j) for j in rng.choice(s, size=k, replace=False)) if k else frozenset()
            for _ in range(n)]


def sample_mask_plan(n: int, c: int, s: int, p_channel: float, p_patch: float,
                     rng: np.random.Generator) -> MaskPlan:
    channel_set, _ = sample_channel_mask(c, p_channel, rng)
    return MaskPlan(channel_set, tuple(sample_patch_masks(n, s, p_patch, rng)), c=c, s=s)


def sinusoidal_encoding(index: int, width: int) -> np.ndarray:
    """Interleaved ``[sin, cos, sin, cos, ...]`` at frequencies ``10000^(-2k/width)``."""
    if width % 2:
        raise ContractError("sinusoidal encoding needs an even width")
    if index < 0:
        raise ContractError("position index must be non-negative")
    freqs = 1.0 / (10000.0 ** (np.arange(0, width, 2) / width))
    out = np.empty(width)
    out[0::2] = np.sin(index * freqs)
    out[1::2] = np.cos(index * freqs)
    return out


def sinusoidal_table(count: int, width: int) -> np.ndarray:
    return np.stack([sinusoidal_encoding(j, width) for j in range(count)]) if count else np.zeros((0, width))


@dataclass(frozen=True)
class TokenSequence:
    """Encoder input: retained tokens ``(B, t, width)`` and their ``(i, j)`` origins ``(B, t, 2)``."""

    tokens: Tensor
    origin: np.ndarray

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def hidden_channels(channel_mask: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Channels withheld from the encoder: sampled mask OR absent at source.

    ``channel_mask`` ``(B, c)`` broadcasts over the snippet axis of ``present`` ``(B, n, c)``.
    """
    return np.asarray(channel_mask, bool)[:, None, :] | ~np.asarray(present, bool)


def embed_patches(values: np.ndarray, hidden: np.ndarray, params: Mapping[str, Tensor], s: int,
                  d_pos: int) -> Tensor:
    """Embedding grid ``(B, n, s, d + d_pos)``.

    Each patch has its hidden channels zeroed, is flattened time-major,
    projected by ``embed.W`` plus ``embed.b``, receives the channel token
    of every hidden channel (``hidden @ embed.C``), and gets the
    within-snippet sinusoidal position concatenated.
    """
    values = np.asarray(values)
    hidden = np.asarray(hidden, dtype=bool)
    if values.ndim != 4 or hidden.shape != (values.shape[0], values.shape[1], values.shape[3]):
        raise ContractError(f"values {values.shape} and hidden {hidden.shape} are inconsistent")
    W, b, C = params["embed.W"], params["embed.b"], params["embed.C"]
    dtype = W.dtype
    B, n, l, c = values.shape
    if C.shape[0] != c or W.shape[0] != (l // s) * c:
        raise ContractError("embedding parameters do not match the data layout")
    # zero hidden channels before anything learnable sees the data
    kept = np.where(hidden[:, :, None, :], 0.0, values).astype(dtype, copy=False)
    flat = patchify(kept, s).reshape(B, n, s, -1)
    content = matmul(Tensor(flat), W) + b
    tokens = matmul(Tensor(hidden.astype(dtype)), C).reshape(B, n, 1, C.shape[1])
    content = content + tokens
    pos = np.broadcast_to(sinusoidal_table(s, d_pos).astype(dtype), (B, n, s, d_pos))
    return concat([content, Tensor(np.ascontiguousarray(pos))], axis=-1)


def build_encoder_sequence(grid: Tensor, patch_mask: np.ndarray) -> TokenSequence:
    """Keep unmasked patches, snippet-major and patch-ascending within a snippet."""
    patch_mask = np.asarray(patch_mask, dtype=bool)
    B, n, s = patch_mask.shape
    if grid.shape[:3] != (B, n, s):
        raise DimensionError(f"grid {grid.shape} vs mask {patch_mask.shape}")
    keep = ~patch_mask.reshape(B, n * s)
    counts = keep.sum(axis=1)
    if np.any(counts != counts[0]):
        raise ContractError("every group in a batch must retain the same number of patches")
    index = np.stack([np.flatnonzero(row) for row in keep]) if B else np.zeros((0, 0), int)
    flat = grid.reshape(B, n * s, grid.shape[-1])
    tokens = take_rows(flat, index)
    origin = np.stack([index // s, index % s], axis=-1)
    return TokenSequence(tokens, origin)


def stack_groups(groups: Sequence[SnippetGroup]):
    """``(values (B, n, l, c), present (B, n, c))`` for a batch of equal-size groups."""
    values = np.stack([np.stack([sn.values for sn in g.snippets]) for g in groups])
    present = np.stack([np.stack([sn.present for sn in g.snippets]) for g in groups])
    return values, present


def stack_plans(plans: Sequence[MaskPlan]):
    """``(channel_mask (B, c), patch_mask (B, n, s))``."""
    return (np.stack([p.channel_indicator() for p in plans]),
            np.stack([p.patch_indicator() for p in plans]))
