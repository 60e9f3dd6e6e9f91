"""Synthetic fleets, CSV ingestion, normalization and cross-validation folds."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, IngestionError, ParseError
from .types import (CANONICAL_CHANNELS, SNIPPET_LENGTH, ChannelSchema, LabelSet, Snippet, align_to_schema)

log = logging.getLogger(__name__)

# CSV column names, in canonical channel order
CSV_CHANNELS = ("voltage", "current", "soc", "vmax", "vmin", "tmax", "tmin", "mileage")
SNIPPET_HEADER = ("snippet_id", "source_id", "t_index") + CSV_CHANNELS
LABEL_HEADER = ("snippet_id", "soh", "ir_mohm", "anomaly", "rul_cycles", "cycle_number")
_CSV_TO_SCHEMA = dict(zip(CSV_CHANNELS, CANONICAL_CHANNELS))

LAB_CHANNELS = ("voltage", "current", "soc", "mileage")


@dataclass
class Dataset:
    snippets: list
    labels: dict = field(default_factory=dict)  # snippet_id -> LabelSet
    kind: str = "ev"

    def sources(self) -> list:
        return list(OrderedDict.fromkeys(s.source_id for s in self.snippets))

    def by_source(self) -> "OrderedDict[str, list]":
        out: OrderedDict = OrderedDict()
        for s in self.snippets:
            out.setdefault(s.source_id, []).append(s)
        return out

    def source_anomaly(self) -> dict:
        """Vehicle-level anomaly flag per source (True if any labelled snippet says so)."""
        flags: dict = {}
        for s in self.snippets:
            lab = self.labels.get(s.snippet_id)
            if lab is not None and lab.anomaly is not None:
                flags[s.source_id] = flags.get(s.source_id, False) or bool(lab.anomaly)
        return flags

    def subset(self, sources: Iterable[str]) -> "Dataset":
        keep = set(sources)
        snips = [s for s in self.snippets if s.source_id in keep]
        return Dataset(snips, {s.snippet_id: self.labels[s.snippet_id] for s in snips if s.snippet_id in self.labels},
                       self.kind)

    def map(self, fn) -> "Dataset":
        return Dataset([fn(s) for s in self.snippets], dict(self.labels), self.kind)


# --------------------------------------------------------------------------
# synthetic fleet
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticFleetConfig:
    n_sources: int = 8
    snippets_per_source: int = 200
    kind: str = "ev"
    anomaly_fraction: float = 0.0
    fade_rate: float = 3e-4
    fade_exponent: float = 1.0
    fade_spread: float = 0.3
    cycle_spacing: int = 5
    voltage_noise: float = 0.002
    current_noise: float = 0.01
    soc_noise: float = 0.001
    label_noise: float = 0.002
    anomaly_spread_factor: float = 3.0
    rate_spread: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.anomaly_fraction < 1:
            raise ContractError("anomaly_fraction must lie in [0, 1)")
        if self.fade_rate <= 0 or self.fade_exponent <= 0:
            raise ContractError("fade rate and exponent must be positive")
        if self.kind not in ("ev", "bess", "lab"):
            raise ContractError(f"unknown kind {self.kind!r}")
        if self.n_sources < 1 or self.snippets_per_source < 1:
            raise ContractError("need at least one source and one snippet")


_KIND = {
    # rated capacity [Ah], base resistance [ohm], km per equivalent cycle
    "lab": dict(capacity=1.1, r0=0.030, km_per_cycle=None),
    "ev": dict(capacity=150.0, r0=0.0008, km_per_cycle=250.0),
    "bess": dict(capacity=189.0, r0=0.0006, km_per_cycle=None),
}

BASE_SPREAD = 0.015  # cell-voltage spread of a healthy pack [V]

# Small fleets used by the desk-scale end-to-end checks.
DESK_FLEETS = {
    "pretrain": SyntheticFleetConfig(n_sources=8, snippets_per_source=200, kind="ev"),
    "capacity": SyntheticFleetConfig(n_sources=20, snippets_per_source=200, kind="lab", fade_rate=1.5e-4,
                                     rate_spread=0.005, seed=1),
    "rul": SyntheticFleetConfig(n_sources=80, snippets_per_source=40, kind="lab", fade_rate=1e-3,
                                fade_spread=0.25, seed=2),
    "anomaly": SyntheticFleetConfig(n_sources=40, snippets_per_source=100, kind="ev", anomaly_fraction=0.5,
                                    anomaly_spread_factor=5.0, seed=3),
}


def ocv(soc):
    """Monotone cubic open-circuit voltage: 3.0 V at empty, 4.2 V at full."""
    s = np.clip(soc, 0.0, 1.0)
    return 3.0 + 1.2 * (1.5 * s - 1.5 * s ** 2 + s ** 3)


def soh_curve(k, alpha: float, beta: float):
    return 1.0 - alpha * np.power(k, beta)


def end_of_life_cycle(alpha: float, beta: float) -> float:
    return (0.2 / alpha) ** (1.0 / beta)


def _triangle(t: np.ndarray, period: float) -> np.ndarray:
    ph = (t / period) % 1.0
    return 4.0 * np.abs(ph - 0.5) - 1.0


def generate_synthetic_fleet(cfg: SyntheticFleetConfig) -> Dataset:
    """Deterministic fleet with capacity fade, resistance growth and anomalies.

    Voltage follows ``OCV(SoC) + I * R(k)``; SoC integrates current against
    the faded capacity; anomalous sources have a widened max/min cell
    voltage spread.
    """
    rng = np.random.default_rng(cfg.seed)
    spec = _KIND[cfg.kind]
    q_rated, r0 = spec["capacity"], spec["r0"]
    l = SNIPPET_LENGTH
    n_anom = int(round(cfg.n_sources * cfg.anomaly_fraction))
    anomalous = np.zeros(cfg.n_sources, dtype=bool)
    anomalous[rng.permutation(cfg.n_sources)[:n_anom]] = True
    lab_rate = 1.0

    snippets, labels = [], {}
    for src in range(cfg.n_sources):
        sid = f"{cfg.kind}{src:03d}"
        alpha = cfg.fade_rate * math.exp(cfg.fade_spread * rng.standard_normal())
        beta = cfg.fade_exponent
        k_eol = end_of_life_cycle(alpha, beta)
        cell_rate = lab_rate * (1.0 + cfg.rate_spread * rng.standard_normal())
        for idx in range(cfg.snippets_per_source):
            k = idx * cfg.cycle_spacing
            soh = max(float(soh_curve(k, alpha, beta)), 0.05)
            r = r0 * (1.0 + 4.0 * (1.0 - soh))
            hours = np.linspace(0.0, 1.0, l)
            if cfg.kind == "lab":
                duration = 0.6 / lab_rate
                c_rate = np.full(l, cell_rate)
                soc0 = 0.05 + 1e-4 * rng.standard_normal()
            elif cfg.kind == "ev":
                duration = 1.0
                base = rng.uniform(0.2, 0.5)
                c_rate = base + 0.08 * _triangle(hours * l, rng.uniform(10, 20))
                soc0 = rng.uniform(0.1, 0.45)
            else:
                duration = 1.0
                c_rate = np.full(l, rng.uniform(0.2, 0.4))
                soc0 = rng.uniform(0.1, 0.5)
            t_h = hours * duration
            current = c_rate * q_rated
            dt = np.diff(t_h, prepend=0.0)
            soc_true = np.clip(soc0 + np.cumsum(current * dt) / (q_rated * soh), 0.0, 1.0)
            volt = ocv(soc_true) + current * r
            meas_i = current + cfg.current_noise * q_rated * rng.standard_normal(l)
            meas_v = volt + cfg.voltage_noise * rng.standard_normal(l)
            meas_soc = np.clip(soc_true + cfg.soc_noise * rng.standard_normal(l), 0.0, 1.0)
            raw = {"voltage": meas_v, "current": meas_i, "soc": meas_soc}
            if cfg.kind != "lab":
                spread = BASE_SPREAD * (1.0 + 2.0 * (1.0 - soh))
                if anomalous[src]:
                    spread *= cfg.anomaly_spread_factor
                spread = spread * (1.0 + 0.1 * rng.standard_normal(l))
                raw["max_cell_voltage"] = meas_v + 0.5 * spread
                raw["min_cell_voltage"] = meas_v - 0.5 * spread
                ambient = rng.uniform(15.0, 30.0)
                heat = ambient + 0.02 * np.cumsum(current ** 2 * r * dt)
                raw["max_temperature"] = heat + 1.0 + 0.1 * rng.standard_normal(l)
                raw["min_temperature"] = heat - 1.0 + 0.1 * rng.standard_normal(l)
            km = spec["km_per_cycle"]
            coord = float(k * km) if km else float(k)
            snip = align_to_schema(raw, source_id=sid, snippet_id=f"{sid}-{idx:05d}", cycle_or_mileage=coord)
            snippets.append(snip)
            noisy = soh + cfg.label_noise * rng.standard_normal()
            labels[snip.snippet_id] = LabelSet(
                soh=float(np.clip(noisy, 1e-3, 1.5)),
                ir_mohm=float(r * 1000.0),
                anomaly=bool(anomalous[src]) if cfg.kind != "lab" else None,
                rul_cycles=int(max(0, round(k_eol) - k)),
            )
    return Dataset(snippets, labels, cfg.kind)


def cycle_number(snippet: Snippet, kind: str) -> float:
    """Equivalent cycle count of a snippet (EV mileage is converted)."""
    km = _KIND.get(kind, {}).get("km_per_cycle")
    return snippet.cycle_or_mileage / km if km else snippet.cycle_or_mileage


# --------------------------------------------------------------------------
# CSV interchange
# --------------------------------------------------------------------------


def _fmt(x: Optional[float]) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_dataset(ds: Dataset, directory, schema: ChannelSchema = ChannelSchema()) -> tuple[Path, Path]:
    """Write ``snippets.csv`` and ``labels.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    snip_path, label_path = directory / "snippets.csv", directory / "labels.csv"
    cols = [schema.index(_CSV_TO_SCHEMA[c]) for c in CSV_CHANNELS]
    with open(snip_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNIPPET_HEADER)
        for s in ds.snippets:
            for t in range(s.length):
                row = [s.snippet_id, s.source_id, t]
                row += [repr(float(s.values[t, k])) if s.present[k] else "" for k in cols]
                w.writerow(row)
    with open(label_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for s in ds.snippets:
            lab = ds.labels.get(s.snippet_id)
            if lab is None:
                continue
            anomaly = "" if lab.anomaly is None else str(int(lab.anomaly))
            rul = "" if lab.rul_cycles is None else str(lab.rul_cycles)
            w.writerow([s.snippet_id, _fmt(lab.soh), _fmt(lab.ir_mohm), anomaly, rul,
                        _fmt(s.cycle_or_mileage)])
    (directory / "kind.txt").write_text(ds.kind + "\n", encoding="utf-8")
    return snip_path, label_path


def _num(cell: str, line: int, name: str) -> Optional[float]:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"non-numeric value {cell!r} in column {name!r}", line) from None


def load_dataset(snippet_file, label_file=None, schema: ChannelSchema = ChannelSchema(),
                 kind: str = "ev") -> Dataset:
    """Read the snippet CSV (and optional label CSV) into a :class:`Dataset`.

    Missing columns or empty cells mark channels absent. Rows of a snippet
    are ordered by ``t_index`` and resampled onto the model grid.
    """
    rows: "OrderedDict[str, dict]" = OrderedDict()
    with open(snippet_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty snippet file", 1) from None
        for req in ("snippet_id", "source_id", "t_index"):
            if req not in header:
                raise ParseError(f"missing column {req!r}", 1)
        unknown = [h for h in header if h not in SNIPPET_HEADER]
        if unknown:
            raise ParseError(f"unknown column(s) {unknown}", 1)
        col = {h: i for i, h in enumerate(header)}
        chans = [c for c in CSV_CHANNELS if c in col]
        current = None
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line)
            sid, src = rec[col["snippet_id"]].strip(), rec[col["source_id"]].strip()
            t = _num(rec[col["t_index"]], line, "t_index")
            if not sid or t is None:
                raise ParseError("snippet_id and t_index are required", line)
            if sid != current:
                # a snippet's rows form one contiguous block
                if sid in rows:
                    raise IngestionError(f"duplicate snippet_id {sid!r} (line {line})")
                rows[sid] = {"source": src, "t": [], "vals": defaultdict(list), "line": line}
                current = sid
            entry = rows[sid]
            if entry["source"] != src:
                raise IngestionError(f"snippet {sid!r} spans sources (line {line})")
            entry["t"].append(t)
            for c in chans:
                entry["vals"][c].append(_num(rec[col[c]], line, c))

    labels: dict = {}
    cycles: dict = {}
    if label_file is not None and Path(label_file).exists():
        labels, cycles = _load_labels(label_file, rows.keys())

    snippets = []
    for sid, entry in rows.items():
        if len(set(entry["t"])) != len(entry["t"]):
            raise IngestionError(f"snippet {sid!r} repeats a t_index (from line {entry['line']})")
        order = np.argsort(entry["t"], kind="stable")
        raw = {}
        for c, series in entry["vals"].items():
            if all(v is None for v in series):
                continue
            if any(v is None for v in series):
                raise ParseError(f"channel {c!r} of snippet {sid!r} is partially empty", entry["line"])
            raw[_CSV_TO_SCHEMA[c]] = np.asarray(series, dtype=np.float64)[order]
        snip = align_to_schema(raw, schema, source_id=entry["source"], snippet_id=sid)
        if sid in cycles and math.isnan(snip.cycle_or_mileage):
            snip = snip.replace(cycle_or_mileage=cycles[sid])
        snippets.append(snip)
    return Dataset(snippets, labels, kind)


def _load_labels(label_file, known_ids) -> tuple[dict, dict]:
    known = set(known_ids)
    labels, cycles = {}, {}
    with open(label_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return labels, cycles
        if "snippet_id" not in header:
            raise ParseError("missing column 'snippet_id'", 1)
        col = {h: i for i, h in enumerate(header)}

        def cell(rec, name):
            return rec[col[name]].strip() if name in col else ""

        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", line)
            sid = cell(rec, "snippet_id")
            if sid not in known:
                log.warning("label for unknown snippet %r (line %d) ignored", sid, line)
                continue
            if sid in labels:
                raise IngestionError(f"duplicate label for snippet {sid!r} (line {line})")
            soh = _num(cell(rec, "soh"), line, "soh")
            ir = _num(cell(rec, "ir_mohm"), line, "ir_mohm")
            an = cell(rec, "anomaly")
            if an not in ("", "0", "1"):
                raise ParseError(f"anomaly must be 0 or 1, got {an!r}", line)
            rul = _num(cell(rec, "rul_cycles"), line, "rul_cycles")
            cyc = _num(cell(rec, "cycle_number"), line, "cycle_number")
            try:
                labels[sid] = LabelSet(soh=soh, ir_mohm=ir, anomaly=None if an == "" else an == "1",
                                       rul_cycles=None if rul is None else int(rul))
            except ContractError as exc:
                raise ParseError(str(exc), line) from None
            if cyc is not None:
                cycles[sid] = cyc
    return labels, cycles


def load_dataset_dir(directory, schema: ChannelSchema = ChannelSchema(), kind: Optional[str] = None) -> Dataset:
    directory = Path(directory)
    snip = directory / "snippets.csv"
    if not snip.exists():
        raise IngestionError(f"{snip} not found")
    if kind is None:
        kind_file = directory / "kind.txt"
        kind = kind_file.read_text().strip() if kind_file.exists() else "ev"
    return load_dataset(snip, directory / "labels.csv", schema, kind)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    clamp: float = 6.0

    def apply(self, snippet: Snippet) -> Snippet:
        z = (snippet.values - self.mean) / self.std
        z = np.clip(z, -self.clamp, self.clamp)
        z = np.where(snippet.present[None, :], z, 0.0)
        return snippet.replace(values=z)

    def invert(self, snippet: Snippet) -> Snippet:
        x = snippet.values * self.std + self.mean
        return snippet.replace(values=np.where(snippet.present[None, :], x, 0.0))

    def apply_dataset(self, ds: Dataset) -> Dataset:
        return ds.map(self.apply)


def fit_normalizer(snippets: Sequence[Snippet], clamp: float = 6.0, floor: float = 1e-6) -> Normalizer:
    """Per-channel z-score over present values only."""
    if not snippets:
        raise ContractError("cannot fit a normalizer on an empty corpus")
    c = snippets[0].values.shape[1]
    total = np.zeros(c)
    count = np.zeros(c)
    for s in snippets:
        total += np.where(s.present, s.values.sum(axis=0), 0.0)
        count += s.present * s.length
    mean = np.divide(total, count, out=np.zeros(c), where=count > 0)
    sq = np.zeros(c)
    for s in snippets:
        d = s.values - mean
        sq += np.where(s.present, (d * d).sum(axis=0), 0.0)
    var = np.divide(sq, count, out=np.ones(c), where=count > 0)
    std = np.where(count > 0, np.maximum(np.sqrt(var), floor), 1.0)
    mean = np.where(count > 0, mean, 0.0)
    return Normalizer(mean, std, clamp)


def identity_normalizer(c: int) -> Normalizer:
    """Pass-through statistics for training on raw channel values."""
    return Normalizer(np.zeros(c), np.ones(c), math.inf)


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple  # tuple of tuples of source ids (non-anomaly tasks)
    normal_folds: tuple = ()
    faulty_folds: tuple = ()
    task: str = "capacity"

    def rounds(self) -> list:
        """``[(train_sources, eval_sources), ...]`` for the ``k`` rotations."""
        out = []
        for r in range(self.k):
            if self.task == "anomaly":
                train = [s for i, f in enumerate(self.normal_folds) if i != r for s in f]
                train += list(self.faulty_folds[r])
                ev = list(self.normal_folds[r])
                ev += [s for i, f in enumerate(self.faulty_folds) if i != r for s in f]
            else:
                train = [s for i, f in enumerate(self.folds) if i != r for s in f]
                ev = list(self.folds[r])
            out.append((train, ev))
        return out


def _split(items: Sequence[str], k: int, rng: np.random.Generator) -> tuple:
    order = list(np.asarray(items, dtype=object)[rng.permutation(len(items))]) if items else []
    return tuple(tuple(str(x) for x in part) for part in np.array_split(np.asarray(order, dtype=object), k))


def make_cv_folds(sources: Sequence[str], task: str, anomalous: Optional[Mapping[str, bool]] = None,
                  k: int = 5, seed: int = 0) -> FoldPlan:
    """Source-level ``k``-fold plan; anomaly splits normal and faulty sources separately."""
    rng = np.random.default_rng(seed)
    sources = list(sources)
    if task == "anomaly":
        if anomalous is None:
            raise ContractError("anomaly folds need per-source anomaly flags")
        normal = [s for s in sources if not anomalous.get(s, False)]
        faulty = [s for s in sources if anomalous.get(s, False)]
        if len(normal) < k or len(faulty) < k:
            raise ContractError(f"anomaly CV needs >= {k} normal and >= {k} faulty sources")
        return FoldPlan(k, (), _split(normal, k, rng), _split(faulty, k, rng), task)
    if len(sources) < k:
        raise ContractError(f"{k}-fold CV needs at least {k} sources, got {len(sources)}")
    return FoldPlan(k, _split(sources, k, rng), task=task)
