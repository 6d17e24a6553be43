"""Dataset loading, normalization, chronological splitting, and windowing.

The on-disk format is a plain CSV (rows = time steps, columns = node-major
then channel) with an optional JSON sidecar carrying {name, N, T, C,
granularity}.  All arrays are float64 with axis order (N, T, C).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, LoadError

Array = np.ndarray

SIDECAR_SUFFIX = ".meta.json"


@dataclass
class TimeSeriesDataset:
    """A multivariate series: ``values[n, t, c]`` for node n, step t, channel c."""

    values: Array
    node_ids: list[str]
    granularity: str = ""
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DimensionError(f"values must be N×T×C, got shape {self.values.shape}")
        n, t, c = self.values.shape
        if n < 2 or t < 2 or c < 1:
            raise DimensionError(f"need N≥2, T≥2, C≥1, got N={n}, T={t}, C={c}")
        if len(self.node_ids) != n:
            raise DimensionError(f"{len(self.node_ids)} node ids for {n} nodes")
        if not np.all(np.isfinite(self.values)):
            raise LoadError("dataset contains non-finite values")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]


@dataclass
class CsvLayout:
    """How to interpret a CSV file: C channels per node, node-major columns."""

    n_channels: int = 1
    has_header: bool = False
    delimiter: str = ","


def load_csv(path, layout: CsvLayout | None = None) -> TimeSeriesDataset:
    """Parse a CSV of shape T×(N·C) into a dataset, with cell-level errors."""
    layout = layout or CsvLayout()
    path = Path(path)
    if not path.exists():
        raise LoadError(f"no such file: {path}")
    rows: list[list[float]] = []
    header: list[str] | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=layout.delimiter)
        for i, row in enumerate(reader):
            if not row:
                continue
            if i == 0 and layout.has_header:
                header = [cell.strip() for cell in row]
                continue
            parsed = []
            for j, cell in enumerate(row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise LoadError(
                        f"{path}: non-numeric value {cell!r} at row {i + 1}, column {j + 1}"
                    ) from None
            if rows and len(parsed) != len(rows[0]):
                raise LoadError(
                    f"{path}: row {i + 1} has {len(parsed)} cells, expected {len(rows[0])}"
                )
            rows.append(parsed)
    if not rows:
        raise LoadError(f"{path}: no data rows")
    flat = np.asarray(rows, dtype=np.float64)  # T × (N·C)
    c = layout.n_channels
    if flat.shape[1] % c:
        raise LoadError(f"{path}: {flat.shape[1]} columns not divisible by C={c}")
    n = flat.shape[1] // c
    # (T, N, C) -> (N, T, C)
    values = flat.reshape(flat.shape[0], n, c).transpose(1, 0, 2)

    name, granularity = path.stem, ""
    node_ids = None
    sidecar = path.with_name(path.name + SIDECAR_SUFFIX)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        name = meta.get("name", name)
        granularity = meta.get("granularity", granularity)
        node_ids = meta.get("node_ids")
        for key, actual in (("N", n), ("T", flat.shape[0]), ("C", c)):
            if key in meta and meta[key] != actual:
                raise LoadError(f"{path}: sidecar {key}={meta[key]} but file has {actual}")
    if node_ids is None:
        if header is not None and c == 1:
            node_ids = header
        else:
            node_ids = [f"node{i}" for i in range(n)]
    return TimeSeriesDataset(values, node_ids, granularity=granularity, name=name)


def save_csv(dataset: TimeSeriesDataset, path) -> None:
    """Write the dataset plus its JSON sidecar; floats round-trip bitwise."""
    path = Path(path)
    n, t, c = dataset.values.shape
    flat = dataset.values.transpose(1, 0, 2).reshape(t, n * c)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in flat:
            writer.writerow([repr(float(v)) for v in row])
    meta = {
        "name": dataset.name,
        "N": n,
        "T": t,
        "C": c,
        "granularity": dataset.granularity,
        "node_ids": list(dataset.node_ids),
    }
    path.with_name(path.name + SIDECAR_SUFFIX).write_text(json.dumps(meta, indent=2))


@dataclass
class SplitSpec:
    """Chronological train/val/test fractions (must be positive, sum to 1)."""

    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        for name, f in (("train", self.train), ("val", self.val), ("test", self.test)):
            if f <= 0:
                raise ConfigurationError(f"{name} fraction must be positive, got {f}")
        if not math.isclose(self.train + self.val + self.test, 1.0, abs_tol=1e-9):
            raise ConfigurationError(
                f"fractions sum to {self.train + self.val + self.test}, expected 1"
            )


def chronological_split(
    dataset: TimeSeriesDataset, spec: SplitSpec
) -> tuple[range, range, range]:
    """Contiguous train/val/test index ranges; remainder goes to test."""
    t = dataset.n_steps
    i1 = int(math.floor(spec.train * t))
    i2 = i1 + int(math.floor(spec.val * t))
    ranges = (range(0, i1), range(i1, i2), range(i2, t))
    for name, r in zip(("train", "val", "test"), ranges):
        if len(r) == 0:
            raise ConfigurationError(f"{name} split is empty for T={t} with {spec}")
    return ranges


@dataclass
class Scaler:
    """Per-node normalization with statistics taken from the training split only.

    modes: ``max-abs`` (divide by per-node/channel max |x|), ``zscore``
    (subtract mean, divide by std), ``none`` (identity).  Zero scales fall
    back to 1 so the transform stays invertible.
    """

    mode: str
    shift: Array  # (N, C)
    scale: Array  # (N, C)

    def transform(self, x: Array) -> Array:
        """Normalize an array whose trailing axes are (N, C)."""
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def inverse(self, x: Array) -> Array:
        return np.asarray(x, dtype=np.float64) * self.scale + self.shift

    def transform_dataset(self, values: Array) -> Array:
        """Normalize an (N, T, C) array in dataset layout."""
        return (values - self.shift[:, None, :]) / self.scale[:, None, :]

    def inverse_dataset(self, values: Array) -> Array:
        return values * self.scale[:, None, :] + self.shift[:, None, :]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(
            mode=d["mode"],
            shift=np.asarray(d["shift"], dtype=np.float64),
            scale=np.asarray(d["scale"], dtype=np.float64),
        )


def fit_scaler(
    dataset: TimeSeriesDataset, train_range: range, mode: str = "max-abs"
) -> Scaler:
    """Fit per-node statistics on ``values[:, train_range, :]`` only."""
    if len(train_range) == 0:
        raise ConfigurationError("cannot fit a scaler on an empty training split")
    n, _, c = dataset.values.shape
    train = dataset.values[:, train_range.start : train_range.stop, :]
    if mode == "none":
        return Scaler("none", np.zeros((n, c)), np.ones((n, c)))
    if mode == "max-abs":
        scale = np.abs(train).max(axis=1)
        shift = np.zeros((n, c))
    elif mode == "zscore":
        shift = train.mean(axis=1)
        scale = train.std(axis=1)
    else:
        raise ConfigurationError(f"unknown scaler mode {mode!r}")
    zero = scale == 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} node/channel series have zero scale under "
            f"{mode}; falling back to scale 1",
            stacklevel=2,
        )
        scale = np.where(zero, 1.0, scale)
    return Scaler(mode, shift, scale)


@dataclass
class WindowSample:
    """One training example anchored at time t (the last input index)."""

    input: Array  # (P, N, C)
    target: Array  # (N, C) single-step or (Q, N, C) multi-step
    anchor_t: int


def make_windows(
    dataset: TimeSeriesDataset,
    p: int,
    q: int,
    task: str,
    segment: range,
) -> list[WindowSample]:
    """Slice look-back/target windows that stay inside one split segment.

    Single-step targets are the value at t+q (one model per horizon);
    multi-step targets are the full sequence t+1 .. t+q.  Yields
    ``len(segment) − p − q + 1`` samples, or none (with a warning) when the
    segment is too short.
    """
    if task not in ("single", "multi"):
        raise ConfigurationError(f"task must be 'single' or 'multi', got {task!r}")
    if p < 1 or q < 1:
        raise ConfigurationError(f"need P≥1 and Q≥1, got P={p}, Q={q}")
    seg_len = len(segment)
    if seg_len < p + q:
        warnings.warn(
            f"segment of length {seg_len} is shorter than P+Q={p + q}; no windows",
            stacklevel=2,
        )
        return []
    values = dataset.values  # (N, T, C)
    samples = []
    first_t = segment.start + p - 1
    last_t = segment.stop - 1 - q
    for t in range(first_t, last_t + 1):
        window = values[:, t - p + 1 : t + 1, :].transpose(1, 0, 2)  # (P, N, C)
        if task == "single":
            target = values[:, t + q, :]  # (N, C)
        else:
            target = values[:, t + 1 : t + q + 1, :].transpose(1, 0, 2)  # (Q, N, C)
        samples.append(WindowSample(window, target, t))
    return samples


def stack_windows(samples: list[WindowSample]) -> tuple[Array, Array, Array]:
    """Stack samples into batched arrays (inputs, targets, anchors)."""
    if not samples:
        raise ConfigurationError("cannot stack an empty sample list")
    inputs = np.stack([s.input for s in samples])
    targets = np.stack([s.target for s in samples])
    anchors = np.asarray([s.anchor_t for s in samples], dtype=np.int64)
    return inputs, targets, anchors
