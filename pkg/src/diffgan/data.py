"""Synthetic anomaly benchmarks, min-max normalisation, sliding windows, CSV I/O.

Timepoints are 0-based throughout. A dataset keeps its split as two
boundaries ``(train_end, val_end)``: train is ``[0, train_end)``, validation
``[train_end, val_end)`` and test ``[val_end, T)``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError, DegenerateDimensionError, ParseError
from .nn_core import RngStream

log = logging.getLogger(__name__)

ANOMALY_KINDS = ("global_point", "contextual_point", "seasonal", "shapelet", "trend")
POINT_KINDS = ("global_point", "contextual_point")
DATASET_NAMES = {
    "global_point": "global",
    "contextual_point": "contextual",
    "seasonal": "seasonal",
    "shapelet": "shapelet",
    "trend": "trend",
}

CONTEXT_WINDOW = 50
MIN_INTERVAL, MAX_INTERVAL, INTERVAL_GAP = 10, 50, 5


@dataclass
class SeriesDataset:
    values: np.ndarray          # [T, D] float64
    labels: np.ndarray          # [T] int8 in {0, 1}
    train_end: int
    val_end: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DatasetError(f"values must be [T, D], got shape {self.values.shape}")
        self.labels = np.asarray(self.labels, dtype=np.int8)
        T = self.values.shape[0]
        if self.labels.shape != (T,):
            raise DatasetError(f"labels length {self.labels.shape} does not match T = {T}")
        if not 0 < self.train_end <= self.val_end <= T:
            raise DatasetError(f"invalid split boundaries ({self.train_end}, {self.val_end}) for T = {T}")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def split(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        bounds = {"train": (0, self.train_end), "val": (self.train_end, self.val_end),
                  "test": (self.val_end, self.T)}
        lo, hi = bounds[part]
        return self.values[lo:hi], self.labels[lo:hi]


def split_boundaries(T: int, ratio=(2, 1, 2)) -> tuple[int, int]:
    total = sum(ratio)
    return round(T * ratio[0] / total), round(T * (ratio[0] + ratio[1]) / total)


# -------------------------------------------------------- normalisation


@dataclass(frozen=True)
class MinMaxStats:
    mins: np.ndarray
    maxs: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        span = self.maxs - self.mins
        out = np.empty_like(values, dtype=np.float64)
        live = span > 0
        out[:, live] = (values[:, live] - self.mins[live]) / span[live]
        out[:, ~live] = 0.5
        return out

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * (self.maxs - self.mins) + self.mins

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxStats":
        return cls(np.asarray(d["mins"], dtype=np.float64), np.asarray(d["maxs"], dtype=np.float64))


def fit_minmax(train_values: np.ndarray, strict: bool = True) -> MinMaxStats:
    mins = train_values.min(axis=0)
    maxs = train_values.max(axis=0)
    for d in np.flatnonzero(maxs <= mins):
        if strict:
            raise DegenerateDimensionError(int(d))
        log.warning("dimension %d is constant on the training partition; mapping it to 0.5", d)
    return MinMaxStats(mins, maxs)


def normalize(dataset: SeriesDataset, strict: bool = True) -> tuple[SeriesDataset, MinMaxStats]:
    """Scale every dimension by the training partition's min and max.

    Validation and test values reuse the training statistics and may fall
    outside ``[0, 1]``.
    """
    stats = fit_minmax(dataset.split("train")[0], strict=strict)
    return replace(dataset, values=stats.transform(dataset.values)), stats


# -------------------------------------------------------------- windows


@dataclass
class WindowSet:
    windows: np.ndarray         # [k, w, D]
    starts: np.ndarray          # [k] 0-based origin of each window
    window_size: int
    stride: int
    uncovered: np.ndarray       # timepoints not inside any window

    def __len__(self) -> int:
        return len(self.starts)


def window_count(T: int, w: int, l: int) -> int:
    return (T - w) // l + 1


def make_windows(values: np.ndarray, w: int, l: int) -> WindowSet:
    """Cut ``values`` ([T, D] array or a SeriesDataset) into windows of size w with step l."""
    if isinstance(values, SeriesDataset):
        values = values.values
    T = values.shape[0]
    if w < 1 or l < 1:
        raise DatasetError(f"window size and stride must be positive, got w={w}, l={l}")
    if w > T:
        raise DatasetError(f"window size {w} exceeds series length {T}: empty window set")
    k = window_count(T, w, l)
    starts = np.arange(k) * l
    idx = starts[:, None] + np.arange(w)[None, :]
    covered_to = starts[-1] + w
    return WindowSet(values[idx], starts, w, l, np.arange(covered_to, T))


# ------------------------------------------------------ synthetic data


@dataclass
class AnomalySpec:
    kind: str = "global_point"
    ratio: float = 0.05
    dim: int = 0
    magnitude: tuple[float, float] | None = None   # kind-specific range, see _DEFAULT_MAGNITUDE
    contaminate_train: bool = False

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise DatasetError(f"unknown anomaly kind {self.kind!r}; expected one of {ANOMALY_KINDS}")
        if not 0 <= self.ratio < 0.5:
            raise DatasetError(f"anomaly ratio must lie in [0, 0.5), got {self.ratio}")
        if self.magnitude is None:
            self.magnitude = _DEFAULT_MAGNITUDE[self.kind]
        self.magnitude = tuple(float(m) for m in self.magnitude)


# global/contextual: multiples of sigma; seasonal: frequency factor;
# shapelet: amplitude factor; trend: total drift in sigma
_DEFAULT_MAGNITUDE = {
    "global_point": (3.0, 5.0),
    "contextual_point": (3.0, 5.0),
    "seasonal": (2.0, 3.0),
    "shapelet": (1.0, 1.0),
    "trend": (2.0, 3.0),
}


def anomaly_count(ratio: float, T: int) -> int:
    # round first so 0.01 * 1000 does not ceil to 11
    return math.ceil(round(ratio * T, 9))


def rolling_mean(x: np.ndarray, window: int = CONTEXT_WINDOW) -> np.ndarray:
    """Centred moving average with shrinking edges."""
    csum = np.concatenate([[0.0], np.cumsum(x)])
    half = window // 2
    lo = np.clip(np.arange(len(x)) - half, 0, len(x))
    hi = np.clip(np.arange(len(x)) + window - half, 0, len(x))
    return (csum[hi] - csum[lo]) / (hi - lo)


@dataclass
class _Components:
    amps: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    offset: float

    def __call__(self, t: np.ndarray, square: bool = False) -> np.ndarray:
        arg = 2 * np.pi * self.freqs[None, :] * t[:, None] + self.phases[None, :]
        wave = np.sign(np.sin(arg)) if square else np.sin(arg)
        return self.offset + (self.amps[None, :] * wave).sum(axis=1)


def _base_components(rng: np.random.Generator, D: int, n_components: int = 2) -> list[_Components]:
    comps = []
    periods_used: set[int] = set()
    for _ in range(D):
        periods = []
        while len(periods) < n_components:
            p = int(rng.integers(20, 200))
            if all(abs(p - q) > 3 for q in periods_used):
                periods.append(p)
                periods_used.add(p)
        comps.append(_Components(
            amps=rng.uniform(0.3, 1.0, n_components),
            freqs=1.0 / np.asarray(periods, dtype=np.float64),
            phases=rng.uniform(0, 2 * np.pi, n_components),
            offset=float(rng.uniform(-1, 1)),
        ))
    return comps


def generate_synthetic(spec: AnomalySpec, T: int, D: int, seed: int, noise_std: float = 0.05,
                       split=(2, 1, 2)) -> SeriesDataset:
    """Sinusoid-mixture series with anomalies injected into one dimension.

    Every dimension is a sum of two sinusoids with distinct periods plus
    Gaussian noise. Anomalies of ``spec.kind`` go into dimension ``spec.dim``
    only, outside the training partition unless ``spec.contaminate_train``.
    Point kinds label exactly ``ceil(ratio * T)`` isolated timepoints; interval
    kinds label every timepoint of injected intervals whose lengths sum to the
    same count. The count is shared between the validation and test splits in
    proportion to their lengths.
    """
    if T < 100:
        raise DatasetError(f"T must be at least 100, got {T}")
    if D < 1:
        raise DatasetError(f"D must be at least 1, got {D}")
    if not 0 <= spec.dim < D:
        raise DatasetError(f"affected dimension {spec.dim} out of range for D = {D}")
    stream = RngStream(seed, ("synthetic", spec.kind))
    rng = stream.numpy
    comps = _base_components(rng, D)
    t = np.arange(T, dtype=np.float64)
    noise = rng.normal(0.0, noise_std, size=(T, D))
    values = np.stack([c(t) for c in comps], axis=1) + noise
    labels = np.zeros(T, dtype=np.int8)
    train_end, val_end = split_boundaries(T, split)

    count = anomaly_count(spec.ratio, T)
    lo = 0 if spec.contaminate_train else train_end
    meta = {"generator": {**asdict(spec), "magnitude": list(spec.magnitude)}, "seed": int(seed),
            "noise_std": noise_std, "T": T, "D": D}
    name = DATASET_NAMES[spec.kind]
    if count == 0:
        return SeriesDataset(values, labels, train_end, val_end, name, meta)
    if count > (T - lo) // 2:
        raise DatasetError(f"ratio {spec.ratio} leaves no room for normal points outside the training split")

    x = values[:, spec.dim]          # view; edits land in ``values``
    sigma = float(x.std())
    comp = comps[spec.dim]
    m_lo, m_hi = spec.magnitude

    # each evaluation split gets a share proportional to its length, so thresholds fit on val see anomalies
    bounds = ([0] if spec.contaminate_train else []) + [train_end, val_end, T]
    segments = [(a, b, n) for (a, b), n in zip(zip(bounds[:-1], bounds[1:]),
                                                _proportional(count, np.diff(bounds))) if n > 0]
    for a, b, n in segments:
        if n > (b - a) // 2:
            raise DatasetError(f"ratio {spec.ratio} leaves no room for normal points in split [{a}, {b})")

    if spec.kind in POINT_KINDS:
        positions = _pick_points(rng, segments, T, spec, x)
        if spec.kind == "global_point":
            signs = rng.choice([-1.0, 1.0], size=count)
            x[positions] += signs * rng.uniform(m_lo, m_hi, size=count) * sigma
        else:
            for p, v in positions.items():
                x[p] = v
            positions = np.asarray(sorted(positions))
        labels[positions] = 1
    else:
        for a, b in (iv for lo_, hi_, n in segments for iv in _pick_intervals(rng, lo_, hi_, n)):
            seg = np.arange(a, b, dtype=np.float64)
            if spec.kind == "seasonal":
                factor = rng.uniform(m_lo, m_hi)
                x[a:b] = comp(a + factor * (seg - a)) + noise[a:b, spec.dim]
            elif spec.kind == "shapelet":
                x[a:b] = comp.offset + rng.uniform(m_lo, m_hi) * (comp(seg, square=True) - comp.offset) \
                    + noise[a:b, spec.dim]
            else:
                drift = rng.uniform(m_lo, m_hi) * sigma * rng.choice([-1.0, 1.0])
                x[a:b] += drift * (seg - a + 1) / (b - a)
            labels[a:b] = 1
    return SeriesDataset(values, labels, train_end, val_end, name, meta)


def _proportional(total: int, sizes) -> list[int]:
    """Split ``total`` over ``sizes`` proportionally (largest remainder, ties to the earlier part)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    exact = total * sizes / sizes.sum()
    out = np.floor(exact + 1e-9).astype(int)
    order = np.argsort(-(exact - out), kind="stable")
    out[order[: total - out.sum()]] += 1
    return out.tolist()


def _pick_points(rng, segments, T, spec, x):
    """Isolated anomaly positions, ``n`` inside each ``[a, b)`` segment; no two adjacent."""
    taken = np.zeros(T + 1, dtype=bool)
    contextual = spec.kind == "contextual_point"
    if contextual:
        rm = rolling_mean(x)
        resid_sd = float((x - rm).std())
        gmin, gmax = float(x.min()), float(x.max())
    chosen: dict[int, float | None] = {}
    for a, b, n in segments:
        placed = 0
        for p in rng.permutation(np.arange(a, b)):
            if taken[p] or taken[p - 1] or taken[p + 1]:
                continue
            value = None
            if contextual:
                # cap the deviation so at least one side stays inside the global range
                room = max(gmax - rm[p], rm[p] - gmin)
                lo_dev, hi_dev = spec.magnitude[0] * resid_sd, min(spec.magnitude[1] * resid_sd, room)
                if hi_dev < lo_dev:
                    continue
                dev = rng.uniform(lo_dev, hi_dev)
                candidates = [v for v in (rm[p] + dev, rm[p] - dev) if gmin <= v <= gmax]
                value = candidates[int(rng.integers(len(candidates)))]
            chosen[int(p)] = value
            taken[p] = True
            placed += 1
            if placed == n:
                break
        if placed < n:
            raise DatasetError(f"could not place {n} isolated {spec.kind} anomalies in [{a}, {b})")
    return chosen if contextual else np.asarray(sorted(chosen))


def _pick_intervals(rng, lo, hi, count):
    """Disjoint intervals in ``[lo, hi)`` with lengths summing to ``count``."""
    lengths = []
    remaining = count
    while remaining > 0:
        n = min(int(rng.integers(MIN_INTERVAL, MAX_INTERVAL + 1)), remaining)
        lengths.append(n)
        remaining -= n
    free = np.ones(hi - lo, dtype=bool)
    intervals = []
    for n in lengths:
        for _ in range(1000):
            a = int(rng.integers(0, hi - lo - n + 1))
            g0, g1 = max(0, a - INTERVAL_GAP), min(hi - lo, a + n + INTERVAL_GAP)
            if free[g0:g1].all():
                free[a:a + n] = False
                intervals.append((lo + a, lo + a + n))
                break
        else:
            raise DatasetError(f"could not place {len(lengths)} disjoint anomaly intervals")
    return sorted(intervals)


# ------------------------------------------------------------------ I/O


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_dataset(dataset: SeriesDataset, path) -> None:
    """Write ``dim_0..dim_{D-1},label`` CSV plus a JSON metadata sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"dim_{d}" for d in range(dataset.D)] + ["label"])
        for row, y in zip(dataset.values.tolist(), dataset.labels.tolist()):
            writer.writerow([repr(v) for v in row] + [y])
    meta = {"name": dataset.name, "T": dataset.T, "D": dataset.D,
            "split": {"train_end": dataset.train_end, "val_end": dataset.val_end}, **{
                k: v for k, v in dataset.meta.items() if k not in ("T", "D")}}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> SeriesDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file: zero rows", line=1)
    header = rows[0]
    if not header or header[-1] != "label" or header[:-1] != [f"dim_{d}" for d in range(len(header) - 1)] \
            or len(header) < 2:
        raise ParseError(f"bad header {header!r}; expected dim_0,...,dim_<D-1>,label", line=1)
    D = len(header) - 1
    if len(rows) == 1:
        raise ParseError("no data rows", line=2)
    values = np.empty((len(rows) - 1, D))
    labels = np.empty(len(rows) - 1, dtype=np.int8)
    for i, row in enumerate(rows[1:]):
        lineno = i + 2
        if len(row) != D + 1:
            raise ParseError(f"expected {D + 1} columns, got {len(row)}", line=lineno)
        try:
            values[i] = [float(v) for v in row[:D]]
        except ValueError:
            raise ParseError(f"non-numeric value in {row[:D]!r}", line=lineno) from None
        if row[D].strip() not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {row[D]!r}", line=lineno)
        labels[i] = int(row[D])
    if not np.isfinite(values).all():
        bad = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0]) + 2
        raise ParseError("non-finite value", line=bad)
    T = len(labels)
    meta_file = _meta_path(path)
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    if "split" in meta:
        train_end, val_end = meta["split"]["train_end"], meta["split"]["val_end"]
    else:
        train_end, val_end = split_boundaries(T)
    name = meta.get("name", path.stem)
    extra = {k: v for k, v in meta.items() if k not in ("name", "split")}
    return SeriesDataset(values, labels, train_end, val_end, name, extra)
