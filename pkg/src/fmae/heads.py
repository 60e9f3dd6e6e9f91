"""Downstream adapters: pooled encoder features, linear heads, RUL pairs, vehicle scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .autograd import Tensor, matmul
from .config import ModelConfig
from .errors import ContractError, DegenerateInputError
from .masking import build_encoder_sequence, embed_patches
from .model import encode
from .nn import trunc_normal
from .types import CANONICAL_CHANNELS, Snippet

HEAD_PREFIX = "head."


@dataclass(frozen=True)
class TaskHead:
    task: str
    channel_policy: tuple = CANONICAL_CHANNELS
    pairing: Optional[int] = None

    def __post_init__(self):
        if (self.pairing is not None) != (self.task == "rul"):
            raise ContractError("a pairing gap is required for rul and only for rul")


FROZEN_HEAD_KEYS = ("head.shift", "head.scale")


def init_head(d_latent: int, rng: np.random.Generator, dtype, bias: float = 0.0,
              features: Optional[np.ndarray] = None, zero: bool = False,
              targets: Optional[np.ndarray] = None, ridge: float = 1e-3) -> dict[str, np.ndarray]:
    """Linear head; with ``features`` ``(N, d')`` it also records their mean and inverse overall spread.

    One shared scale (the RMS of the per-dimension std) keeps near-constant
    feature dimensions from being blown up. Passing ``targets`` as well
    starts the head at the ridge fit of those features, with the bias at the
    target mean.
    """
    head = {"head.W": np.zeros((d_latent, 1), dtype=dtype) if zero else trunc_normal(rng, (d_latent, 1), dtype=dtype),
            "head.b": np.full(1, bias, dtype=dtype)}
    if features is None:
        if targets is not None:
            raise ContractError("a ridge start needs the features")
        return head
    f = np.asarray(features, dtype=np.float64)
    shift = f.mean(axis=0)
    spread = max(float(np.sqrt(np.mean(f.var(axis=0)))), 1e-6)
    head["head.shift"] = shift.astype(dtype)
    head["head.scale"] = np.full(f.shape[1], 1.0 / spread, dtype=dtype)
    if targets is not None:
        y = np.asarray(targets, dtype=np.float64).ravel()
        if y.shape[0] != f.shape[0]:
            raise ContractError("features and targets disagree on the sample count")
        x = (f - shift) / spread
        gram = x.T @ x + ridge * len(y) * np.eye(f.shape[1])
        head["head.W"] = np.linalg.solve(gram, x.T @ (y - y.mean()))[:, None].astype(dtype)
        head["head.b"] = np.full(1, y.mean(), dtype=dtype)
    return head


def pad_missing_channels(snippet: Snippet) -> frozenset:
    """Channels to route through the channel-token pathway at inference."""
    if not snippet.present.any():
        raise DegenerateInputError("snippet has no observed channel")
    return frozenset(int(k) for k in np.flatnonzero(~snippet.present))


def snippet_features(values: np.ndarray, present: np.ndarray, params: Mapping[str, Tensor],
                     cfg: ModelConfig) -> Tensor:
    """Mean of the projected encoder latents over all patches of each snippet.

    ``values`` ``(B, l, c)`` normalized; ``present`` ``(B, c)``. No patch is
    masked; absent channels get their channel tokens. Returns ``(B, d')``.
    """
    values = np.asarray(values)[:, None]
    hidden = ~np.asarray(present, dtype=bool)[:, None]
    grid = embed_patches(values, hidden, params, cfg.s, cfg.d_pos)
    no_mask = np.zeros((values.shape[0], 1, cfg.s), dtype=bool)
    seq = build_encoder_sequence(grid, no_mask)
    _, z = encode(seq, params, cfg)
    return z.mean(axis=1)


def snippet_feature(snippet: Snippet, params: Mapping[str, Tensor], cfg: ModelConfig) -> np.ndarray:
    return snippet_features(snippet.values[None], snippet.present[None], params, cfg).data[0]


def regression_forward(feature, params: Mapping[str, Tensor]) -> Tensor:
    """Affine map of ``(B, d')`` features (or one ``(d',)`` feature) to scalars.

    When the head carries ``head.shift``/``head.scale`` (fixed feature
    statistics), features are standardized first.
    """
    f = feature if isinstance(feature, Tensor) else Tensor(np.asarray(feature))
    single = f.ndim == 1
    if single:
        f = f.reshape(1, f.shape[0])
    if "head.shift" in params:
        f = (f - params["head.shift"]) * params["head.scale"]
    out = (matmul(f, params["head.W"]) + params["head.b"]).reshape(f.shape[0])
    return out[0] if single else out


def rul_pair_feature(early: Snippet, late: Snippet, params: Mapping[str, Tensor], cfg: ModelConfig,
                     gap: int = 20, cycle_of=None) -> np.ndarray:
    """``feature(late) - feature(early)`` for two snippets ``gap`` cycles apart."""
    cyc = cycle_of or (lambda s: s.cycle_or_mileage)
    if not math.isclose(cyc(late) - cyc(early), gap):
        raise ContractError(f"snippets are {cyc(late) - cyc(early)} cycles apart, expected {gap}")
    feats = snippet_features(np.stack([early.values, late.values]),
                             np.stack([early.present, late.present]), params, cfg).data
    return feats[1] - feats[0]


def rul_pairs(cycles: Sequence[float], wanted: Sequence[int] = (40, 60, 80, 100), gap: int = 20) -> list:
    """Consecutive ``(early, late)`` index pairs among snippets at the wanted cycles."""
    where = {}
    for i, c in enumerate(cycles):
        if c in wanted and c not in where:
            where[c] = i
    pairs = []
    for c in sorted(where):
        if c + gap in where:
            pairs.append((where[c], where[c + gap]))
    return pairs


def anomaly_vehicle_score(logits: Sequence[float]) -> float:
    """Mean of the top ``ceil(10%)`` per-snippet logits."""
    x = np.asarray(logits, dtype=np.float64).ravel()
    if x.size == 0:
        raise DegenerateInputError("no logits to score")
    k = math.ceil(0.1 * x.size)
    return float(np.mean(np.sort(x)[-k:]))
