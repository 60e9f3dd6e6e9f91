"""FMAE encoder-decoder: encoding, battery-state padding, reconstruction and loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .autograd import Tensor, concat, scatter_rows, weighted_square_error
from .config import ModelConfig
from .errors import ConsistencyError, ContractError, DegenerateInputError
from .masking import (TokenSequence, build_encoder_sequence, embed_patches, hidden_channels, patchify,
                      sinusoidal_table, stack_groups)
from .nn import init_linear, init_transformer_stack, linear, transformer_stack, trunc_normal
from .types import MaskPlan, SnippetGroup

ENCODER_PREFIXES = ("embed.", "enc.", "latent_proj.")
DECODER_PREFIXES = ("state_proj.", "dec.", "recon.")


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh weights: truncated normal (std 0.02), zero biases, unit layer-norm scales."""
    dt = np.dtype(cfg.dtype)
    p = {
        "embed.W": trunc_normal(rng, (cfg.patch_dim, cfg.d), dtype=dt),
        "embed.b": np.zeros(cfg.d, dtype=dt),
        "embed.C": trunc_normal(rng, (cfg.c, cfg.d), dtype=dt),
    }
    p.update(init_transformer_stack(rng, cfg.enc_width, cfg.enc_layers, cfg.mlp_ratio, "enc", dt))
    p.update(init_linear(rng, cfg.d, cfg.d_latent, "latent_proj", dt))
    p.update(init_linear(rng, cfg.state_dim, cfg.d_latent, "state_proj", dt))
    p.update(init_transformer_stack(rng, cfg.dec_width, cfg.dec_layers, cfg.mlp_ratio, "dec", dt))
    p.update(init_linear(rng, cfg.dec_width, cfg.patch_dim, "recon", dt))
    return p


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_params(cfg, np.random.default_rng(0)).items()}


def parameter_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def as_trainable(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def encoder_only(arrays: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in arrays.items() if k.startswith(ENCODER_PREFIXES)}


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------


def encode(seq: TokenSequence, params: Mapping[str, Tensor], cfg: ModelConfig):
    """Transformer encoder, then the shared projection of the ``d`` content columns.

    Returns ``(z_hat, z)`` with shapes ``(B, t, d + d_pos)`` and ``(B, t, d')``.
    """
    if seq.tokens.shape[-1] != cfg.enc_width:
        raise ContractError(f"token width {seq.tokens.shape[-1]} != {cfg.enc_width}")
    z_hat = transformer_stack(seq.tokens, params, "enc", cfg.enc_layers, cfg.enc_heads)
    z = linear(z_hat[..., : cfg.d], params, "latent_proj")
    return z_hat, z


def state_patches(values: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Flattened state-channel blocks per patch, ``(B, n*s, l0 * n_state)``."""
    B, n = values.shape[:2]
    p = patchify(values, cfg.s)[..., list(cfg.schema.state_indices)]
    return p.reshape(B, n * cfg.s, -1)


def battery_state_tokens(values: np.ndarray, patch_mask: np.ndarray, params: Mapping[str, Tensor],
                         cfg: ModelConfig) -> Tensor:
    """Project the pre-masking state channels of each masked patch to width ``d'``.

    Output ``(B, m, d')`` in snippet-major order of the masked positions.
    """
    B = values.shape[0]
    idx = _masked_index(patch_mask)
    blocks = state_patches(values, cfg)[np.arange(B)[:, None], idx]
    return linear(Tensor(blocks.astype(params["state_proj.W"].dtype, copy=False)), params, "state_proj")


def _masked_index(patch_mask: np.ndarray) -> np.ndarray:
    B = patch_mask.shape[0]
    flat = patch_mask.reshape(B, -1)
    counts = flat.sum(axis=1)
    if np.any(counts != counts[0]):
        raise ContractError("every group in a batch must mask the same number of patches")
    return np.stack([np.flatnonzero(r) for r in flat]) if B else np.zeros((0, 0), int)


@dataclass(frozen=True)
class DecoderInput:
    tokens: Tensor  # (B, n*s, d' + d'_pos)
    filled: np.ndarray  # (B, n, s) True where encoder-derived


def assemble_decoder_input(z: Tensor, origin: np.ndarray, fill: Tensor, patch_mask: np.ndarray,
                           cfg: ModelConfig) -> DecoderInput:
    """Scatter latents to retained positions and ``fill`` to masked ones, then add position.

    ``fill`` is ``(B, m, d')`` aligned with the masked positions, or a single
    ``(d',)`` token broadcast to all of them.
    """
    B, n, s = patch_mask.shape
    size = n * s
    ret_idx = origin[..., 0] * s + origin[..., 1]
    mask_idx = _masked_index(patch_mask)
    cover = np.zeros((B, size), dtype=np.int64)
    np.add.at(cover, (np.arange(B)[:, None], ret_idx), 1)
    np.add.at(cover, (np.arange(B)[:, None], mask_idx), 1)
    if np.any(cover != 1):
        raise ConsistencyError("decoder grid has holes or double-filled positions")
    filled = np.zeros((B, size), dtype=bool)
    filled[np.arange(B)[:, None], ret_idx] = True
    if fill.ndim == 1:
        fill = fill.reshape(1, 1, fill.shape[0]) * Tensor(np.ones((B, mask_idx.shape[1], 1), dtype=fill.dtype))
    grid = scatter_rows(z, ret_idx, size) + scatter_rows(fill, mask_idx, size)
    pos = np.tile(sinusoidal_table(s, cfg.d_latent_pos), (n, 1)).astype(grid.dtype)
    pos = np.ascontiguousarray(np.broadcast_to(pos, (B, size, cfg.d_latent_pos)))
    return DecoderInput(concat([grid, Tensor(pos)], axis=-1), filled.reshape(B, n, s))


def decode_reconstruct(dec_in: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig, n: int) -> Tensor:
    """Decoder stack plus per-token linear head; returns ``(B, n, s, l0 * c)``."""
    if dec_in.shape[-1] != cfg.dec_width:
        raise ContractError(f"decoder input width {dec_in.shape[-1]} != {cfg.dec_width}")
    h = transformer_stack(dec_in, params, "dec", cfg.dec_layers, cfg.dec_heads)
    out = linear(h, params, "recon")
    return out.reshape(out.shape[0], n, cfg.s, cfg.patch_dim)


def loss_mask(patch_mask: np.ndarray, channel_mask: np.ndarray, present: np.ndarray, cfg: ModelConfig,
              include_channel_mask: bool = True) -> np.ndarray:
    """Elements scored by the pretraining loss, shape ``(B, n, s, l0, c)``.

    Every element of a masked patch, plus masked-channel columns of retained
    patches; absent channels never count since they carry no ground truth.
    """
    B, n, s = patch_mask.shape
    pm = patch_mask[:, :, :, None, None]
    avail = np.asarray(present, bool)[:, :, None, None, :]
    m = pm & avail
    if include_channel_mask:
        cm = np.asarray(channel_mask, bool)[:, None, None, None, :]
        m = m | (~pm & cm & avail)
    return np.broadcast_to(m, (B, n, s, cfg.l0, cfg.c))


def pretrain_loss(recon: Tensor, values: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked MSE per group in normalized units, averaged over groups."""
    B, n, s, pd = recon.shape
    target = patchify(values, s).reshape(B, n, s, pd)
    m = np.asarray(mask, bool).reshape(B, n, s, pd)
    counts = m.reshape(B, -1).sum(axis=1)
    if np.any(counts == 0):
        raise DegenerateInputError("a group has an empty effective loss mask")
    weights = m / counts[:, None, None, None] / B
    return weighted_square_error(recon, target, weights)


@dataclass
class PretrainOutput:
    loss: Tensor
    recon: Tensor
    z: Tensor
    sequence: TokenSequence
    mask: np.ndarray


def pretrain_forward(values: np.ndarray, present: np.ndarray, channel_mask: np.ndarray,
                     patch_mask: np.ndarray, params: Mapping[str, Tensor], cfg: ModelConfig,
                     include_channel_mask: bool = True) -> PretrainOutput:
    """Full masked-reconstruction pass over a batch of groups.

    ``values`` must already be normalized with absent channels zero.
    """
    n = values.shape[1]
    hidden = hidden_channels(channel_mask, present)
    grid = embed_patches(values, hidden, params, cfg.s, cfg.d_pos)
    seq = build_encoder_sequence(grid, patch_mask)
    _, z = encode(seq, params, cfg)
    states = battery_state_tokens(values, patch_mask, params, cfg)
    dec_in = assemble_decoder_input(z, seq.origin, states, patch_mask, cfg)
    recon = decode_reconstruct(dec_in.tokens, params, cfg, n)
    mask = loss_mask(patch_mask, channel_mask, present, cfg, include_channel_mask)
    loss = pretrain_loss(recon, values, mask)
    return PretrainOutput(loss, recon, z, seq, mask)


def group_forward(group: SnippetGroup, plan: MaskPlan, params: Mapping[str, Tensor], cfg: ModelConfig,
                  include_channel_mask: bool = True) -> PretrainOutput:
    values, present = stack_groups([group])
    return pretrain_forward(values, present, plan.channel_indicator()[None], plan.patch_indicator()[None],
                            params, cfg, include_channel_mask)


# --------------------------------------------------------------------------
# collapse probe
# --------------------------------------------------------------------------


@dataclass
class ProbeResult:
    mode: str
    outputs: dict  # (i, j) -> reconstruction vector at a masked position
    divergence: np.ndarray  # (n, n) max |diff| over shared masked j; nan if none shared
    max_divergence: float


def collapse_probe(group: SnippetGroup, plan: MaskPlan, params: Mapping[str, Tensor], cfg: ModelConfig,
                   mode: str = "battery_state", mask_token: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None) -> ProbeResult:
    """Compare decoder outputs at equal masked positions across snippets.

    ``vanilla_mask_token`` fills every masked position with one shared token
    (plus position); ``battery_state`` uses the projected state channels.
    """
    if mode not in ("vanilla_mask_token", "battery_state"):
        raise ContractError(f"unknown probe mode {mode!r}")
    n = len(plan.patch_sets)
    shared = [(a, b) for a in range(n) for b in range(a + 1, n)
              if plan.patch_sets[a] & plan.patch_sets[b]]
    if not shared:
        raise ContractError("no two snippets share a masked patch index")
    values, present = stack_groups([group])
    channel_mask = plan.channel_indicator()[None]
    patch_mask = plan.patch_indicator()[None]
    hidden = hidden_channels(channel_mask, present)
    seq = build_encoder_sequence(embed_patches(values, hidden, params, cfg.s, cfg.d_pos), patch_mask)
    _, z = encode(seq, params, cfg)
    if mode == "battery_state":
        fill = battery_state_tokens(values, patch_mask, params, cfg)
    else:
        if mask_token is None:
            rng = rng or np.random.default_rng(0)
            mask_token = trunc_normal(rng, (cfg.d_latent,), dtype=np.dtype(cfg.dtype))
        fill = Tensor(np.asarray(mask_token, dtype=z.dtype))
    dec_in = assemble_decoder_input(z, seq.origin, fill, patch_mask, cfg)
    recon = decode_reconstruct(dec_in.tokens, params, cfg, n).data[0]
    outputs = {(i, j): recon[i, j] for i in range(n) for j in sorted(plan.patch_sets[i])}
    div = np.full((n, n), np.nan)
    for a, b in shared:
        common = plan.patch_sets[a] & plan.patch_sets[b]
        worst = max(float(np.max(np.abs(outputs[(a, j)] - outputs[(b, j)]))) for j in common)
        div[a, b] = div[b, a] = worst
    return ProbeResult(mode, outputs, div, float(np.nanmax(div)))


__all__ = [
    "init_params", "param_shapes", "parameter_count", "as_trainable", "encoder_only", "encode",
    "battery_state_tokens", "assemble_decoder_input", "decode_reconstruct", "loss_mask", "pretrain_loss",
    "pretrain_forward", "group_forward", "collapse_probe", "ProbeResult", "PretrainOutput", "DecoderInput",
]
