"""Configuration dataclasses and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ConfigError, ContractError
from .types import CANONICAL_CHANNELS, ChannelSchema

TASKS = ("capacity", "ir", "anomaly", "rul")
DATASET_KINDS = ("ev", "bess", "lab")

# Finetuning learning rates per task (capacity additionally per dataset kind).
FINETUNE_LR = {
    ("capacity", "ev"): 0.00625,
    ("capacity", "bess"): 0.0625,
    ("capacity", "lab"): 0.00625,
    "ir": 0.001,
    "anomaly": 0.000625,
    "rul": 0.00125,
}

# Fraction of each training source's snippets used for finetuning.
SNIPPET_FRACTION = {"capacity": 0.05, "ir": 0.2, "anomaly": 0.2, "rul": 1.0}


@dataclass(frozen=True)
class ModelConfig:
    schema: ChannelSchema = ChannelSchema()
    l: int = 128
    s: int = 8
    d: int = 96
    d_pos: int = 12
    enc_layers: int = 6
    enc_heads: int = 3
    d_latent: int = 64
    d_latent_pos: int = 8
    dec_layers: int = 4
    dec_heads: int = 4
    mlp_ratio: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.l % self.s:
            raise ContractError(f"l={self.l} not divisible by s={self.s}")
        if self.enc_width % self.enc_heads:
            raise ContractError("encoder width not divisible by encoder heads")
        if self.dec_width % self.dec_heads:
            raise ContractError("decoder width not divisible by decoder heads")
        if self.d_pos % 2 or self.d_latent_pos % 2:
            raise ContractError("positional widths must be even")

    @property
    def c(self) -> int:
        return self.schema.c

    @property
    def l0(self) -> int:
        return self.l // self.s

    @property
    def patch_dim(self) -> int:
        return self.l0 * self.c

    @property
    def enc_width(self) -> int:
        return self.d + self.d_pos

    @property
    def dec_width(self) -> int:
        return self.d_latent + self.d_latent_pos

    @property
    def state_dim(self) -> int:
        return self.l0 * len(self.schema.state_indices)

    @classmethod
    def minimal(cls) -> "ModelConfig":
        """Tiny configuration used for finite-difference checks (c=3, l=8, s=2, d=6)."""
        return cls(schema=ChannelSchema.from_names(("voltage", "current", "soc")), l=8, s=2, d=6,
                   d_pos=2, enc_layers=1, enc_heads=2, d_latent=4, d_latent_pos=2, dec_layers=1,
                   dec_heads=2, mlp_ratio=2, dtype="float64")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 800
    warmup_epochs: int = 40
    batch_groups: int = 256
    n: int = 5
    peak_lr: float = 1.5e-4
    p_patch: float = 0.5
    p_channel: float = 0.4
    seed: int = 0
    loss_on_channel_mask: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_groups < 1 or self.n < 1 or self.peak_lr <= 0:
            raise ContractError("pretraining config values must be positive")
        if not (0 <= self.p_patch < 1 and 0 <= self.p_channel < 1):
            raise ContractError("masking probabilities must lie in [0, 1)")


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "capacity"
    dataset_kind: str = "lab"
    lr: Optional[float] = None
    epochs: int = 50
    patience: int = 10
    batch_size: int = 32
    snippet_fraction: Optional[float] = None
    val_fraction: float = 0.15
    warmup_epochs: int = 5
    normalize: bool = True
    rul_cycles: tuple = (40, 60, 80, 100)
    rul_gap: int = 20
    channels: tuple = CANONICAL_CHANNELS
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if self.dataset_kind not in DATASET_KINDS:
            raise ContractError(f"unknown dataset kind {self.dataset_kind!r}")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        if self.task == "capacity":
            return FINETUNE_LR[("capacity", self.dataset_kind)]
        return FINETUNE_LR[self.task]

    @property
    def resolved_fraction(self) -> float:
        return SNIPPET_FRACTION[self.task] if self.snippet_fraction is None else self.snippet_fraction


# --------------------------------------------------------------------------
# flat text format
# --------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def _coerce(value: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float) or current is None and key in ("lr", "snippet_fraction"):
            return None if value.lower() == "none" else float(value)
        if isinstance(current, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(v) for v in items)
            return tuple(items)
        if isinstance(current, ChannelSchema):
            return ChannelSchema.from_names([v.strip() for v in value.split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return value


def apply_overrides(obj, values: dict[str, str], *, strict: bool = True):
    """Return a copy of dataclass ``obj`` with matching keys replaced."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in values.items():
        if key in names:
            changes[key] = _coerce(value, getattr(obj, key), key)
        elif strict:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return dataclasses.replace(obj, **changes)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None


def split_overrides(values: dict[str, str], *targets) -> list:
    """Apply one flat key/value dict to several dataclasses; every key must land somewhere."""
    known = set()
    for t in targets:
        known |= {f.name for f in dataclasses.fields(t)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return [apply_overrides(t, values, strict=False) for t in targets]


def config_echo(*objs, prefix_by_type: bool = True) -> dict[str, str]:
    """Flatten dataclasses into ``{section.key: value}`` strings."""
    out = {}
    for obj in objs:
        section = type(obj).__name__
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, ChannelSchema):
                v = ",".join(v.names)
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            key = f"{section}.{f.name}" if prefix_by_type else f.name
            out[key] = repr(v) if isinstance(v, float) else str(v)
    return out


def model_config_from_echo(echo: dict[str, str]) -> ModelConfig:
    vals = {k.split(".", 1)[1]: v for k, v in echo.items() if k.startswith("ModelConfig.")}
    return apply_overrides(ModelConfig(), vals)


__all__ = [
    "ModelConfig", "PretrainConfig", "FinetuneConfig", "TASKS", "DATASET_KINDS", "FINETUNE_LR",
    "SNIPPET_FRACTION", "parse_config_text", "read_config", "apply_overrides", "split_overrides",
    "config_echo", "model_config_from_echo",
]
