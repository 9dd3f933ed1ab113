"""Series ingestion, normalisation, windowing, fault injection and synthetic data."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import DAYS_PER_WEEK
from .errors import (
    DataError,
    DegenerateError,
    InsufficientDataError,
    ParseError,
    ReferentialError,
)
from .graph import RoadGraph
from .io import atomic_write_text, load_arrays, save_arrays

DEFAULT_RATIOS = (0.7, 0.1, 0.2)
SPLITS = ("train", "val", "test")
MINUTES_PER_DAY = 24 * 60


@dataclass
class TrafficSeries:
    """Observations ``values[step, vertex, channel]`` on a fixed cadence."""

    values: np.ndarray
    dow: np.ndarray
    tod: np.ndarray
    steps_per_day: int
    vertex_ids: tuple[str, ...]
    missing: np.ndarray | None = None
    start: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.ndim != 3:
            raise DataError(f"series values must be steps x vertices x channels, got {self.values.shape}")
        self.dow = np.asarray(self.dow, dtype=np.int64)
        self.tod = np.asarray(self.tod, dtype=np.int64)
        if self.missing is None:
            self.missing = np.zeros(self.values.shape, dtype=bool)
        if self.values.shape[1] != len(self.vertex_ids):
            raise DataError(f"{self.values.shape[1]} columns but {len(self.vertex_ids)} vertex ids")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if (np.asarray(self.std) <= 0).any():
            raise DegenerateError("standard deviation must be positive")

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(m) for m in self.mean], "std": [float(s) for s in self.std]}


def zscore_fit_apply(values, stats: NormStats | None = None):
    """Normalise per channel (last axis); fit the statistics when none are given."""
    values = np.asarray(values, dtype=np.float64)
    if stats is None:
        flat = values.reshape(-1, values.shape[-1])
        std = flat.std(axis=0)
        if (std == 0).any():
            raise DegenerateError("a channel is constant; cannot normalise")
        stats = NormStats(flat.mean(axis=0), std)
    return stats.apply(values), stats


def split_bounds(n_steps: int, ratios=DEFAULT_RATIOS) -> list[tuple[int, int]]:
    """Chronological [start, stop) step ranges for train/val/test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    cuts = [0]
    acc = 0.0
    for r in ratios[:-1]:
        acc += r
        cuts.append(int(round(acc * n_steps)))
    cuts.append(n_steps)
    return [(cuts[i], cuts[i + 1]) for i in range(3)]


def split_windows(n_steps: int, history: int, horizon: int, ratios=DEFAULT_RATIOS) -> dict[str, np.ndarray]:
    """Start steps of every stride-1 window that fits inside one split."""
    span = history + horizon
    if n_steps < span:
        raise InsufficientDataError(f"series has {n_steps} steps, a window needs {span}")
    out = {}
    for name, ratio, (a, b) in zip(SPLITS, ratios, split_bounds(n_steps, ratios)):
        if b - a < span:
            if ratio > 0:
                raise InsufficientDataError(f"{name} split has {b - a} steps, a window needs {span}")
            out[name] = np.zeros(0, dtype=np.int64)
            continue
        out[name] = np.arange(a, b - span + 1, dtype=np.int64)
    return out


@dataclass
class WindowSet:
    """Lazily materialised (history, target) windows over a normalised series."""

    values: np.ndarray
    dow: np.ndarray
    tod: np.ndarray
    starts: np.ndarray
    history: int
    horizon: int

    def __len__(self):
        return len(self.starts)

    def batch(self, idx=None):
        """Returns ``X (B,P,N,C)``, ``Y (B,Q,N,C)``, ``dow (B,P+Q)``, ``tod (B,P+Q)``."""
        starts = self.starts if idx is None else self.starts[np.asarray(idx)]
        steps = starts[:, None] + np.arange(self.history + self.horizon)
        block = self.values[steps]
        return block[:, : self.history], block[:, self.history :], self.dow[steps], self.tod[steps]

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.values, self.dow, self.tod, self.starts[np.asarray(idx, dtype=np.int64)], self.history, self.horizon)


@dataclass
class Dataset:
    """Normalised series, its split windows, and the graph it lives on."""

    values: np.ndarray
    dow: np.ndarray
    tod: np.ndarray
    steps_per_day: int
    vertex_ids: tuple[str, ...]
    distances: np.ndarray
    stats: NormStats
    history: int
    horizon: int
    ratios: tuple[float, float, float]
    starts: dict[str, np.ndarray]
    missing: np.ndarray
    epsilon: float = 0.1
    start: str | None = None
    meta: dict = field(default_factory=dict)

    def windows(self, split: str) -> WindowSet:
        if split not in self.starts:
            raise DataError(f"unknown split {split!r}")
        return WindowSet(self.values, self.dow, self.tod, self.starts[split], self.history, self.horizon)

    @property
    def graph(self) -> RoadGraph:
        return RoadGraph(self.vertex_ids, self.distances, self.epsilon)

    @property
    def n_vertices(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def raw_values(self) -> np.ndarray:
        return self.stats.inverse(self.values)


def prepare_dataset(graph: RoadGraph, series: TrafficSeries, history: int, horizon: int, ratios=DEFAULT_RATIOS) -> Dataset:
    """Align to graph order, split by time, fit normalisation on train only."""
    if tuple(series.vertex_ids) != tuple(graph.vertex_ids):
        order = [series.vertex_ids.index(v) if v in series.vertex_ids else -1 for v in graph.vertex_ids]
        if -1 in order:
            missing = [v for v, o in zip(graph.vertex_ids, order) if o < 0]
            raise ReferentialError(f"series lacks graph vertices {missing[:5]}")
        extra = set(series.vertex_ids) - set(graph.vertex_ids)
        if extra:
            raise ReferentialError(f"series has vertices absent from the graph: {sorted(extra)[:5]}")
        values = series.values[:, order]
        missing_mask = series.missing[:, order]
    else:
        values, missing_mask = series.values, series.missing
    starts = split_windows(series.n_steps, history, horizon, ratios)
    a, b = split_bounds(series.n_steps, ratios)[0]
    _, stats = zscore_fit_apply(values[a:b])
    return Dataset(
        values=stats.apply(values),
        dow=series.dow,
        tod=series.tod,
        steps_per_day=series.steps_per_day,
        vertex_ids=tuple(graph.vertex_ids),
        distances=np.asarray(graph.distances),
        stats=stats,
        history=history,
        horizon=horizon,
        ratios=tuple(float(r) for r in ratios),
        starts=starts,
        missing=missing_mask,
        epsilon=graph.epsilon,
        start=series.start,
    )


def save_dataset(ds: Dataset, path) -> None:
    arrays = {
        "values": ds.values,
        "dow": ds.dow,
        "tod": ds.tod,
        "distances": np.where(np.isfinite(ds.distances), ds.distances, -1.0),
        "missing": ds.missing,
        "stats_mean": ds.stats.mean,
        "stats_std": ds.stats.std,
    }
    for split, s in ds.starts.items():
        arrays[f"starts_{split}"] = s
    meta = {
        "kind": "dataset",
        "format": 1,
        "vertex_ids": list(ds.vertex_ids),
        "steps_per_day": ds.steps_per_day,
        "history": ds.history,
        "horizon": ds.horizon,
        "ratios": list(ds.ratios),
        "epsilon": ds.epsilon,
        "start": ds.start,
        "meta": ds.meta,
    }
    save_arrays(path, arrays, meta)


def load_dataset(path) -> Dataset:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "dataset":
        raise DataError(f"{path} is not a prepared dataset")
    d = arrays["distances"]
    return Dataset(
        values=arrays["values"],
        dow=arrays["dow"],
        tod=arrays["tod"],
        steps_per_day=int(meta["steps_per_day"]),
        vertex_ids=tuple(meta["vertex_ids"]),
        distances=np.where(d < 0, np.inf, d),
        stats=NormStats(arrays["stats_mean"], arrays["stats_std"]),
        history=int(meta["history"]),
        horizon=int(meta["horizon"]),
        ratios=tuple(meta["ratios"]),
        starts={s: arrays[f"starts_{s}"] for s in SPLITS},
        missing=arrays["missing"],
        epsilon=float(meta["epsilon"]),
        start=meta.get("start"),
        meta=meta.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# series files


def _forward_fill(values: np.ndarray, missing: np.ndarray, path) -> np.ndarray:
    out = values.copy()
    for j in range(values.shape[1]):
        col = out[:, j]
        ok = ~missing[:, j]
        if not ok.any():
            raise DataError(f"{path}: column {j} has no observations")
        idx = np.where(ok, np.arange(len(col)), 0)
        np.maximum.accumulate(idx, out=idx)
        first = int(np.argmax(ok))
        filled = col[idx]
        filled[:first] = col[first]
        out[:, j] = filled
    return out


def load_series(paths, step_minutes: int = 5) -> TrafficSeries:
    """Read one CSV per channel: ``timestamp,<vertex ids>``; empty cells are missing."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    if MINUTES_PER_DAY % step_minutes:
        raise DataError(f"step of {step_minutes} minutes does not divide a day")
    channels, stamps, ids, masks = [], None, None, []
    for path in map(Path, paths):
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0].strip() != "timestamp" or len(header) < 2:
                raise ParseError("expected header timestamp,<vertex ids>", path, 1)
            cols = tuple(h.strip() for h in header[1:])
            if ids is not None and cols != ids:
                raise ReferentialError(f"{path}: vertex columns differ from the first series file")
            ids = cols
            times, rows, miss = [], [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
                try:
                    times.append(dt.datetime.fromisoformat(row[0].strip()))
                except ValueError:
                    raise ParseError(f"bad timestamp {row[0]!r}", path, lineno) from None
                vals, m = [], []
                for cell in row[1:]:
                    cell = cell.strip()
                    if cell == "":
                        vals.append(np.nan)
                        m.append(True)
                        continue
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise ParseError(f"bad value {cell!r}", path, lineno) from None
                    m.append(False)
                rows.append(vals)
                miss.append(m)
            if not times:
                raise DataError(f"{path}: no observations")
            step = dt.timedelta(minutes=step_minutes)
            for i in range(1, len(times)):
                if times[i] - times[i - 1] != step:
                    raise ParseError(f"timestamps must advance by {step_minutes} minutes", path, i + 2)
            if stamps is not None and times != stamps:
                raise DataError(f"{path}: timestamps differ from the first series file")
            stamps = times
            vals = np.array(rows)
            mask = np.array(miss, dtype=bool)
            channels.append(_forward_fill(vals, mask, path))
            masks.append(mask)
    values = np.stack(channels, axis=-1)
    steps_per_day = MINUTES_PER_DAY // step_minutes
    first = stamps[0]
    if (first.hour * 60 + first.minute) % step_minutes or first.second or first.microsecond:
        raise DataError("first timestamp is not aligned to the step grid")
    dow = np.array([t.weekday() for t in stamps])
    tod = np.array([(t.hour * 60 + t.minute) // step_minutes for t in stamps])
    return TrafficSeries(values, dow, tod, steps_per_day, ids, np.stack(masks, axis=-1), first.isoformat())


def save_series(series: TrafficSeries, path, channel: int = 0) -> None:
    start = dt.datetime.fromisoformat(series.start) if series.start else dt.datetime(2024, 1, 1)
    step = dt.timedelta(minutes=MINUTES_PER_DAY // series.steps_per_day)
    lines = ["timestamp," + ",".join(series.vertex_ids)]
    vals = series.values[:, :, channel]
    for t in range(series.n_steps):
        stamp = (start + t * step).isoformat()
        lines.append(stamp + "," + ",".join(repr(float(v)) for v in vals[t]))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# fault injection


def inject_faults(X, eta: float, seed: int = 0) -> np.ndarray:
    """Zero exactly ``round(eta * P * N * C)`` entries of every (P, N, C) sample.

    Leading axes of ``X`` are treated as independent samples.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    X = np.array(X, dtype=np.float64, copy=True)
    if X.ndim < 3:
        raise DataError(f"fault injection expects (..., P, N, C), got {X.shape}")
    per = int(np.prod(X.shape[-3:]))
    k = int(np.floor(eta * per + 0.5))
    if k == 0:
        return X
    flat = X.reshape(-1, per)
    rng = np.random.default_rng(seed)
    keys = rng.random(flat.shape)
    drop = np.argpartition(keys, k - 1, axis=1)[:, :k] if k < per else np.tile(np.arange(per), (len(flat), 1))
    np.put_along_axis(flat, drop, 0.0, axis=1)
    return flat.reshape(X.shape)


# ---------------------------------------------------------------------------
# synthetic traffic


@dataclass
class SynthParams:
    """Generative knobs for ``synth_generate``. Arrays are per vertex."""

    base: np.ndarray | None = None
    amplitude: np.ndarray | None = None
    peak_shift: np.ndarray | None = None
    morning_peak: float = 8.0
    evening_peak: float = 17.5
    morning_width: float = 0.8
    evening_width: float = 1.0
    evening_ratio: float = 0.8
    weekend_factor: float = 0.4
    persistence: float = 0.97
    coupling: float = 0.025
    innovation: float = 1.0
    noise: float = 1.0
    burn_in_days: int = 2

    def to_dict(self) -> dict:
        out = {}
        for k, v in vars(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def daily_profile(hours: np.ndarray, shift: float, p: SynthParams) -> np.ndarray:
    """Two Gaussian rush-hour bumps, unit height in the morning."""
    m = np.exp(-0.5 * ((hours - p.morning_peak - shift) / p.morning_width) ** 2)
    e = p.evening_ratio * np.exp(-0.5 * ((hours - p.evening_peak - shift) / p.evening_width) ** 2)
    return m + e


def synth_generate(graph: RoadGraph, days: int, steps_per_day: int = 288, seed: int = 0, params: SynthParams | None = None):
    """Simulate traffic on ``graph``.

    value = base + amplitude * weekday factor * double-peak profile
            + latent + observation noise,
    where the latent deviation follows
        x[t+1] = persistence * x[t] + coupling * Abar x[t] + innovation * xi[t],
    ``Abar`` being the row-normalised adjacency without self-loops.

    Returns the series and a dict of the generative parameters.
    """
    if days < 1:
        raise ValueError("days must be at least 1")
    p = params or SynthParams()
    n = graph.n_vertices
    rng = np.random.default_rng(seed)
    base = p.base if p.base is not None else rng.uniform(40.0, 60.0, n)
    amp = p.amplitude if p.amplitude is not None else rng.uniform(15.0, 35.0, n)
    shift = p.peak_shift if p.peak_shift is not None else rng.uniform(-0.5, 0.5, n)
    base, amp, shift = (np.broadcast_to(np.asarray(a, dtype=np.float64), (n,)).copy() for a in (base, amp, shift))

    adj = np.array(graph.adjacency, dtype=np.float64)
    np.fill_diagonal(adj, 0.0)
    rows = adj.sum(axis=1, keepdims=True)
    abar = np.divide(adj, rows, out=np.zeros_like(adj), where=rows > 0)
    transition = p.persistence * np.eye(n) + p.coupling * abar

    steps = days * steps_per_day
    burn = p.burn_in_days * steps_per_day
    x = np.zeros(n)
    latent = np.empty((steps, n))
    shocks = rng.standard_normal((burn + steps, n))
    for t in range(burn + steps):
        if t >= burn:
            latent[t - burn] = x
        x = transition @ x + p.innovation * shocks[t]

    t_idx = np.arange(steps)
    tod = t_idx % steps_per_day
    dow = (t_idx // steps_per_day) % DAYS_PER_WEEK
    hours = tod * 24.0 / steps_per_day
    week = np.where(dow >= 5, p.weekend_factor, 1.0)
    profile = np.stack([daily_profile(hours, s, p) for s in shift], axis=1)
    clean = base + amp * week[:, None] * profile
    values = clean + latent + p.noise * rng.standard_normal((steps, n))
    series = TrafficSeries(values[:, :, None], dow, tod, steps_per_day, graph.vertex_ids, start="2024-01-01T00:00:00")
    truth = p.to_dict()
    truth.update(base=base.tolist(), amplitude=amp.tolist(), peak_shift=shift.tolist(), seed=seed, days=days)
    return series, truth
