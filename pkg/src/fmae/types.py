"""Data model for snippets, groups, labels and mask plans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, SchemaError

SNIPPET_LENGTH = 128

CANONICAL_CHANNELS = (
    "voltage",
    "current",
    "soc",
    "max_cell_voltage",
    "min_cell_voltage",
    "max_temperature",
    "min_temperature",
    "mileage",
)
CANONICAL_UNITS = ("V", "A", "fraction", "V", "V", "degC", "degC", "km|cycle")
STATE_CHANNELS = ("current", "soc", "mileage")


@dataclass(frozen=True)
class ChannelSchema:
    names: tuple[str, ...] = CANONICAL_CHANNELS
    units: tuple[str, ...] = CANONICAL_UNITS
    state_indices: tuple[int, ...] = (1, 2, 7)
    mileage_index: Optional[int] = 7

    def __post_init__(self):
        if len(self.units) != len(self.names):
            raise SchemaError("units and names differ in length")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("duplicate channel names")
        for k in self.state_indices:
            if not 0 <= k < len(self.names):
                raise SchemaError(f"state index {k} out of range")
        if self.mileage_index is not None and not 0 <= self.mileage_index < len(self.names):
            raise SchemaError("mileage index out of range")

    @property
    def c(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown channel {name!r}") from None

    @classmethod
    def canonical(cls) -> "ChannelSchema":
        return cls()

    @classmethod
    def from_names(cls, names: Sequence[str], state: Sequence[str] = STATE_CHANNELS) -> "ChannelSchema":
        """Schema over a subset/reordering of the canonical channels."""
        names = tuple(names)
        units = []
        for n in names:
            if n not in CANONICAL_CHANNELS:
                raise SchemaError(f"unknown channel {n!r}")
            units.append(CANONICAL_UNITS[CANONICAL_CHANNELS.index(n)])
        state_idx = tuple(names.index(s) for s in state if s in names)
        mileage = names.index("mileage") if "mileage" in names else None
        return cls(names, tuple(units), state_idx, mileage)


@dataclass(frozen=True, eq=False)
class Snippet:
    """One fixed-length multichannel segment.

    ``values`` is ``(l, c)``; absent channels hold zeros.
    """

    values: np.ndarray
    present: np.ndarray
    source_id: str
    cycle_or_mileage: float = math.nan
    snippet_id: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        present = np.array(self.present, dtype=bool)
        if values.ndim != 2 or present.shape != (values.shape[1],):
            raise SchemaError(f"values {values.shape} inconsistent with present {present.shape}")
        if np.any(values[:, ~present] != 0.0):
            raise SchemaError("absent channels must be zero-filled")
        values.flags.writeable = False
        present.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "present", present)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    def replace(self, **changes) -> "Snippet":
        kw = dict(values=self.values, present=self.present, source_id=self.source_id,
                  cycle_or_mileage=self.cycle_or_mileage, snippet_id=self.snippet_id)
        kw.update(changes)
        return Snippet(**kw)

    def equals(self, other: "Snippet") -> bool:
        return (
            self.source_id == other.source_id
            and self.snippet_id == other.snippet_id
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.values, other.values)
            and (self.cycle_or_mileage == other.cycle_or_mileage
                 or (math.isnan(self.cycle_or_mileage) and math.isnan(other.cycle_or_mileage)))
        )


@dataclass(frozen=True)
class SnippetGroup:
    snippets: tuple[Snippet, ...]
    source_id: str

    def __len__(self):
        return len(self.snippets)


@dataclass(frozen=True)
class LabelSet:
    soh: Optional[float] = None
    ir_mohm: Optional[float] = None
    anomaly: Optional[bool] = None
    rul_cycles: Optional[int] = None

    def __post_init__(self):
        if self.soh is not None and not 0.0 < self.soh <= 1.5:
            raise ContractError(f"soh {self.soh} outside (0, 1.5]")
        if self.rul_cycles is not None and self.rul_cycles < 0:
            raise ContractError("rul_cycles must be non-negative")


@dataclass(frozen=True)
class MaskPlan:
    """Masked channel set S (shared by the group) and per-snippet patch sets."""

    channel_set: frozenset[int]
    patch_sets: tuple[frozenset[int], ...]
    c: int = 8
    s: int = 8

    def __post_init__(self):
        if any(not 0 <= k < self.c for k in self.channel_set):
            raise ContractError("channel index out of range")
        for ps in self.patch_sets:
            if any(not 0 <= j < self.s for j in ps):
                raise ContractError("patch index out of range")

    @property
    def n(self) -> int:
        return len(self.patch_sets)

    def channel_indicator(self) -> np.ndarray:
        v = np.zeros(self.c, dtype=bool)
        v[list(self.channel_set)] = True
        return v

    def patch_indicator(self) -> np.ndarray:
        m = np.zeros((self.n, self.s), dtype=bool)
        for i, ps in enumerate(self.patch_sets):
            m[i, list(ps)] = True
        return m


def _resample(series: np.ndarray, length: int) -> np.ndarray:
    src = np.linspace(0.0, 1.0, series.shape[0])
    dst = np.linspace(0.0, 1.0, length)
    if series.shape[0] == length:
        return series.copy()
    return np.interp(dst, src, series)


def align_to_schema(
    raw: Mapping[str, Sequence[float]],
    schema: ChannelSchema = ChannelSchema(),
    *,
    source_id: str = "",
    snippet_id: str = "",
    cycle_or_mileage: Optional[float] = None,
    length: int = SNIPPET_LENGTH,
) -> Snippet:
    """Resample a channel->series map onto a uniform ``length``-point grid.

    Unprovided channels are zero-filled and marked absent. When
    ``cycle_or_mileage`` is given and no mileage series is, the mileage
    channel is filled with that constant.
    """
    known = [k for k in raw if k in schema.names]
    unknown = [k for k in raw if k not in schema.names]
    if unknown:
        raise SchemaError(f"unknown channel(s): {', '.join(map(str, unknown))}")
    if not known:
        raise SchemaError("no recognised channel in input")

    values = np.zeros((length, schema.c))
    present = np.zeros(schema.c, dtype=bool)
    for name in known:
        series = np.asarray(raw[name], dtype=np.float64).ravel()
        if series.shape[0] < 2:
            raise DegenerateInputError(f"channel {name!r} has fewer than 2 samples")
        k = schema.index(name)
        values[:, k] = _resample(series, length)
        present[k] = True

    m = schema.mileage_index
    if cycle_or_mileage is not None and m is not None and not present[m]:
        values[:, m] = cycle_or_mileage
        present[m] = True
    if cycle_or_mileage is None:
        cycle_or_mileage = float(values[0, m]) if m is not None and present[m] else math.nan
    return Snippet(values, present, source_id, float(cycle_or_mileage), snippet_id)


def snippet_to_raw(snippet: Snippet, schema: ChannelSchema = ChannelSchema()) -> dict[str, np.ndarray]:
    return {name: snippet.values[:, k] for k, name in enumerate(schema.names) if snippet.present[k]}


def restrict_channels(snippet: Snippet, keep: Sequence[str], schema: ChannelSchema = ChannelSchema()) -> Snippet:
    """Mark every channel not in ``keep`` absent (data zeroed)."""
    mask = np.zeros(schema.c, dtype=bool)
    for name in keep:
        mask[schema.index(name)] = True
    present = snippet.present & mask
    values = np.where(present[None, :], snippet.values, 0.0)
    return snippet.replace(values=values, present=present)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def __bool__(self):
        return not self.violations

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_group(group: SnippetGroup, n: int = 5, length: int = SNIPPET_LENGTH) -> ValidationReport:
    """Check group invariants; never raises."""
    report = ValidationReport()
    sources = {s.source_id for s in group.snippets}
    if len(sources) > 1:
        report.violations.append("mixed sources")
    elif sources and sources != {group.source_id}:
        report.violations.append("group source_id disagrees with members")
    if len(group.snippets) != n:
        report.violations.append(f"group size {len(group.snippets)} != {n}")
    for s in group.snippets:
        if s.length != length:
            report.violations.append(f"snippet {s.snippet_id!r} has length {s.length}")
    ids = [s.snippet_id for s in group.snippets]
    if len(set(ids)) != len(ids):
        report.violations.append("duplicate snippets")
    return report
