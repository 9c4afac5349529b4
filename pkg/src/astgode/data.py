"""Traffic archives, chronological splits, normalization and segment sampling.

Indexing convention: the segment labelled ``t`` covers rows ``[t, t + T_h)`` of
the series.  For an anchor ``t_p`` the predicted segment is labelled ``t_p`` and
the three inputs are labelled ``t_p - T_h`` (recent), ``t_p - T_d`` (daily) and
``t_p - T_w`` (weekly).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import rng

__all__ = [
    "BRANCHES",
    "Layout",
    "TrafficArchive",
    "NormalizationStats",
    "SampleBundle",
    "Batch",
    "ArchiveFormatError",
    "write_archive",
    "read_archive",
    "read_csv_matrix",
    "load_archive",
    "split_ranges",
    "chronological_split",
    "fit_normalizer",
    "normalize",
    "denormalize",
    "enumerate_valid_anchors",
    "extract_bundle",
    "stack_bundles",
    "synthetic_archive",
    "synthetic_distances",
]

BRANCHES = ("weekly", "daily", "recent")

ARCHIVE_MAGIC = b"ASTG"
ARCHIVE_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class ArchiveFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    """Step counts per hour and per day; a week is always seven days."""

    steps_per_hour: int
    steps_per_day: int

    def __post_init__(self):
        if self.steps_per_hour <= 0 or self.steps_per_day <= 0:
            raise ValueError("step counts must be positive")
        if self.steps_per_hour % 3:
            raise ValueError(f"steps_per_hour={self.steps_per_hour} must be divisible by 3")
        if self.steps_per_day % self.steps_per_hour:
            raise ValueError("steps_per_day must be a multiple of steps_per_hour")

    @property
    def steps_per_week(self) -> int:
        return 7 * self.steps_per_day

    @classmethod
    def from_cadence(cls, minutes: float, steps_per_day: int | None = None) -> "Layout":
        if not minutes or minutes <= 0:
            raise ValueError(f"cadence must be a positive number of minutes, got {minutes!r}")
        per_hour = 60 / minutes
        if per_hour != int(per_hour):
            raise ValueError(f"a {minutes}-minute cadence does not divide one hour")
        per_hour = int(per_hour)
        return cls(per_hour, steps_per_day if steps_per_day is not None else 24 * per_hour)


@dataclass(frozen=True)
class TrafficArchive:
    series: np.ndarray  # (T, N, F), NaN where missing
    layout: Layout
    cadence_minutes: float

    def __post_init__(self):
        s = np.asarray(self.series, dtype=np.float64)
        if s.ndim != 3:
            raise ValueError(f"series must be T x N x F, got shape {s.shape}")
        if np.isinf(s).any():
            raise ValueError("series contains infinite values")
        s.setflags(write=False)
        object.__setattr__(self, "series", s)

    @property
    def mask(self) -> np.ndarray:
        """True where observed."""
        return ~np.isnan(self.series)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.series.shape

    @property
    def missing_fraction(self) -> float:
        return float(np.isnan(self.series).mean()) if self.series.size else 0.0


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class SampleBundle:
    anchor: int
    offsets: dict  # branch -> t_b
    steps: dict  # branch -> delta t_b
    inputs: dict  # branch -> (T_h, N, F), normalized, missing imputed with 0
    targets: dict  # "predicted" or (branch, k) -> (T_h, N, F), normalized, NaN-free
    masks: dict  # same keys as targets, True where observed


@dataclass(frozen=True)
class Batch:
    anchors: tuple
    inputs: dict  # branch -> (B, T_h, N, F)
    targets: dict
    masks: dict

    def __len__(self):
        return len(self.anchors)


# -- file formats --------------------------------------------------------------


def write_archive(path, archive: TrafficArchive) -> None:
    T, N, F = archive.shape
    cad = archive.cadence_minutes
    if cad != int(cad):
        raise ValueError("binary archives store an integral cadence in minutes")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, T, N, F, int(cad)))
        fh.write(np.ascontiguousarray(archive.series, dtype="<f8").tobytes())


def read_archive(path, steps_per_day: int | None = None) -> TrafficArchive:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ArchiveFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, T, N, F, cad = _HEADER.unpack_from(raw)
    if magic != ARCHIVE_MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic {magic!r}")
    if version != ARCHIVE_VERSION:
        raise ArchiveFormatError(f"{path}: unsupported version {version}")
    expected = T * N * F * 8
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise ArchiveFormatError(
            f"{path}: header declares {T}x{N}x{F} values ({expected} bytes), payload has {len(payload)}"
        )
    if cad == 0:
        raise ArchiveFormatError(f"{path}: cadence is absent (0 minutes)")
    series = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(T, N, F)
    return TrafficArchive(series, Layout.from_cadence(cad, steps_per_day), float(cad))


def read_csv_matrix(path, n_features: int = 1) -> np.ndarray:
    """Read a ``T x (N*F)`` CSV with one header row into a ``(T, N, F)`` array.

    Columns are vertex-major (column ``n*F + f``).  Empty cells and ``nan`` are missing.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ArchiveFormatError(f"{path}:1: missing header row")
        width = len(header)
        if width % n_features:
            raise ArchiveFormatError(f"{path}:1: {width} columns is not a multiple of F={n_features}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ArchiveFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            vals = []
            for col, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell == "" or cell.lower() == "nan":
                    vals.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise ArchiveFormatError(f"{path}:{lineno}:{col}: cannot parse {cell!r}") from None
                if not np.isfinite(v):
                    raise ArchiveFormatError(f"{path}:{lineno}:{col}: non-finite value {cell!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ArchiveFormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64).reshape(len(rows), width // n_features, n_features)


def load_archive(
    path,
    steps_per_day: int | None = None,
    *,
    csv_features: int = 1,
    csv_cadence_minutes: float | None = None,
) -> TrafficArchive:
    """Load a binary archive, or a CSV matrix when the file lacks the binary magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == ARCHIVE_MAGIC:
        return read_archive(path, steps_per_day)
    if csv_cadence_minutes is None:
        raise ArchiveFormatError(f"{path}: CSV input needs an explicit cadence")
    series = read_csv_matrix(path, csv_features)
    layout = Layout.from_cadence(csv_cadence_minutes, steps_per_day)
    return TrafficArchive(series, layout, float(csv_cadence_minutes))


# -- splitting and normalization ---------------------------------------------------


def split_ranges(n_steps: int, ratios: Sequence[float] = (0.7, 0.1, 0.2)) -> tuple[range, range, range]:
    """Contiguous train/val/test ranges with boundaries ``floor(r0*T)`` and ``floor((r0+r1)*T)``."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    fr = [Fraction(str(r)) for r in ratios]
    b1 = int(fr[0] * n_steps)
    b2 = int((fr[0] + fr[1]) * n_steps)
    parts = (range(0, b1), range(b1, b2), range(b2, n_steps))
    for name, r in zip(("train", "val", "test"), parts):
        if len(r) == 0:
            raise ValueError(f"T={n_steps} leaves the {name} split empty")
    return parts


def chronological_split(
    archive: TrafficArchive, ratios: Sequence[float] = (0.7, 0.1, 0.2), require_anchors: bool = True
) -> tuple[range, range, range]:
    parts = split_ranges(archive.shape[0], ratios)
    if require_anchors:
        for name, r in zip(("train", "val", "test"), parts):
            if not enumerate_valid_anchors(archive, r):
                raise ValueError(
                    f"T={archive.shape[0]} is too short: the {name} split {r} holds no valid anchor"
                )
    return parts


def fit_normalizer(archive: TrafficArchive, train_range: range) -> NormalizationStats:
    """Per-feature mean and population std over observed training entries."""
    if len(train_range) == 0:
        raise ValueError("training range is empty")
    block = archive.series[train_range.start:train_range.stop]
    F = block.shape[2]
    mean = np.empty(F)
    std = np.empty(F)
    for f in range(F):
        vals = block[:, :, f]
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            raise ValueError(f"feature {f} has no observed entries in the training range")
        mean[f] = vals.mean()
        std[f] = max(vals.std(), 1e-8)
    return NormalizationStats(mean, std)


def normalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


# -- segments ------------------------------------------------------------------------


def enumerate_valid_anchors(archive: TrafficArchive, split_range: range) -> list[int]:
    T = archive.shape[0]
    lo = max(split_range.start, archive.layout.steps_per_week)
    hi = min(split_range.stop, T - archive.layout.steps_per_hour + 1)
    return list(range(lo, hi))


def branch_offsets(layout: Layout, anchor: int) -> dict:
    return {
        "weekly": anchor - layout.steps_per_week,
        "daily": anchor - layout.steps_per_day,
        "recent": anchor - layout.steps_per_hour,
    }


def _segment(series: np.ndarray, start: int, length: int) -> np.ndarray:
    return series[start:start + length]


def extract_bundle(archive: TrafficArchive, anchor: int, stats: NormalizationStats) -> SampleBundle:
    lay = archive.layout
    T = archive.shape[0]
    th = lay.steps_per_hour
    if anchor - lay.steps_per_week < 0 or anchor + th > T:
        raise ValueError(f"anchor {anchor} is not valid for an archive of length {T}")
    raw = archive.series
    offsets = branch_offsets(lay, anchor)
    steps = {b: (anchor - t) // 3 for b, t in offsets.items()}
    inputs = {}
    targets = {}
    masks = {}
    for b in BRANCHES:
        seg = normalize(_segment(raw, offsets[b], th), stats)
        inputs[b] = np.where(np.isnan(seg), 0.0, seg)
        for k in (1, 2):
            tseg = normalize(_segment(raw, offsets[b] + k * steps[b], th), stats)
            masks[(b, k)] = ~np.isnan(tseg)
            targets[(b, k)] = np.where(masks[(b, k)], tseg, 0.0)
    pseg = normalize(_segment(raw, anchor, th), stats)
    masks["predicted"] = ~np.isnan(pseg)
    targets["predicted"] = np.where(masks["predicted"], pseg, 0.0)
    return SampleBundle(anchor, offsets, steps, inputs, targets, masks)


def stack_bundles(bundles: Sequence[SampleBundle]) -> Batch:
    if not bundles:
        raise ValueError("cannot stack an empty list of bundles")
    first = bundles[0]
    return Batch(
        anchors=tuple(b.anchor for b in bundles),
        inputs={k: np.stack([b.inputs[k] for b in bundles]) for k in first.inputs},
        targets={k: np.stack([b.targets[k] for b in bundles]) for k in first.targets},
        masks={k: np.stack([b.masks[k] for b in bundles]) for k in first.masks},
    )


# -- synthetic data -----------------------------------------------------------------


def synthetic_archive(
    n_steps: int,
    n_vertices: int,
    layout: Layout,
    *,
    n_features: int = 1,
    noise: float = 0.05,
    daily_amplitude: float = 1.0,
    weekly_amplitude: float = 1.0,
    missing_rate: float = 0.0,
    phase_spread: float = 1.0,
    seed: int = 0,
    cadence_minutes: float | None = None,
) -> TrafficArchive:
    """Daily plus weekly sinusoids with per-vertex phase and level, plus Gaussian noise.

    Phases are drawn uniformly from ``[0, 2*pi*phase_spread)``.
    """
    g = rng(seed)
    t = np.arange(n_steps)[:, None, None]
    level = g.uniform(-0.5, 0.5, size=(1, n_vertices, n_features))
    ph_d = g.uniform(0, 2 * np.pi, size=(1, n_vertices, n_features)) * phase_spread
    ph_w = g.uniform(0, 2 * np.pi, size=(1, n_vertices, n_features)) * phase_spread
    x = (
        level
        + daily_amplitude * np.sin(2 * np.pi * t / layout.steps_per_day + ph_d)
        + weekly_amplitude * np.sin(2 * np.pi * t / layout.steps_per_week + ph_w)
        + noise * g.standard_normal((n_steps, n_vertices, n_features))
    )
    if missing_rate > 0:
        x[g.random(x.shape) < missing_rate] = np.nan
    cad = cadence_minutes if cadence_minutes is not None else 60 / layout.steps_per_hour
    return TrafficArchive(x, layout, float(cad))


def synthetic_distances(n_vertices: int, seed: int = 0, neighbours: int = 3) -> list[tuple[int, int, float]]:
    """Distance records between each sensor and its nearest neighbours on a random 2-D layout."""
    g = rng(seed)
    pts = g.uniform(0, 1000.0, size=(n_vertices, 2))
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    recs = []
    for i in range(n_vertices):
        for j in np.argsort(d[i])[1:neighbours + 1]:
            recs.append((i, int(j), float(d[i, j])))
    return recs
