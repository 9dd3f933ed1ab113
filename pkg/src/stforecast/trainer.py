"""Optimisation, evaluation metrics, baselines and the experiment drivers."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import VARIANTS
from .autodiff import Parameter, backward, finite_difference_report, no_grad
from .data import Dataset, NormStats, WindowSet, inject_faults, split_bounds
from .embedding import load_embeddings, node2vec_embed
from .errors import DataError, NumericError
from .model import Forecaster, ModelConfig, loss_mae

MAPE_FLOOR = 1e-3
DEFAULT_ETAS = tuple(round(0.1 * i, 1) for i in range(1, 10))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_global_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """Bias-corrected Adam update using each parameter's ``grad``."""
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {p.name or id(p)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    """Errors in original units, aggregated and per horizon step."""

    mae: float
    rmse: float
    mape: float
    step_mae: np.ndarray
    step_rmse: np.ndarray
    step_mape: np.ndarray

    def rows(self):
        yield ("all", self.mae, self.rmse, self.mape)
        for q in range(len(self.step_mae)):
            yield (q + 1, self.step_mae[q], self.step_rmse[q], self.step_mape[q])


class _Accumulator:
    def __init__(self, horizon: int):
        self.abs = np.zeros(horizon)
        self.sq = np.zeros(horizon)
        self.pct = np.zeros(horizon)
        self.n = np.zeros(horizon)
        self.n_pct = np.zeros(horizon)

    def add(self, pred: np.ndarray, target: np.ndarray):
        err = pred - target
        axes = tuple(i for i in range(err.ndim) if i != 1)
        self.abs += np.abs(err).sum(axis=axes)
        self.sq += (err * err).sum(axis=axes)
        self.n += err.size / err.shape[1]
        ok = np.abs(target) > MAPE_FLOOR
        ratio = np.divide(np.abs(err), np.abs(target), out=np.zeros_like(err), where=ok)
        self.pct += ratio.sum(axis=axes)
        self.n_pct += ok.sum(axis=axes)

    def report(self) -> MetricReport:
        if not self.n.any():
            raise DataError("no samples to evaluate")
        n_pct = np.maximum(self.n_pct, 1)
        return MetricReport(
            mae=float(self.abs.sum() / self.n.sum()),
            rmse=float(math.sqrt(self.sq.sum() / self.n.sum())),
            mape=float(self.pct.sum() / max(self.n_pct.sum(), 1)),
            step_mae=self.abs / self.n,
            step_rmse=np.sqrt(self.sq / self.n),
            step_mape=self.pct / n_pct,
        )


def metrics(pred, target) -> MetricReport:
    """Metrics for arrays shaped (B, Q, N, C) already in original units."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    acc = _Accumulator(pred.shape[1])
    acc.add(pred, target)
    return acc.report()


def predict_windows(model: Forecaster, windows: WindowSet, batch_size: int = 64, transform=None):
    """Yield (normalised prediction, normalised target) per batch."""
    for i, lo in enumerate(range(0, len(windows), batch_size)):
        idx = np.arange(lo, min(lo + batch_size, len(windows)))
        X, Y, dow, tod = windows.batch(idx)
        if transform is not None:
            X = transform(X, i)
        with no_grad():
            pred = model.predict(X, dow, tod).data
        yield pred, Y


def evaluate(model: Forecaster, windows: WindowSet, stats: NormStats, batch_size: int = 64, transform=None) -> MetricReport:
    """De-normalise predictions and targets, then score them."""
    if len(windows) == 0:
        raise DataError("cannot evaluate on an empty sample set")
    acc = _Accumulator(windows.horizon)
    for pred, Y in predict_windows(model, windows, batch_size, transform):
        acc.add(stats.inverse(pred), stats.inverse(Y))
    return acc.report()


# ---------------------------------------------------------------------------
# baselines


def persistence_forecast(windows: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    """Repeat the last observed step over the horizon (normalised units)."""
    X, Y, _, _ = windows.batch()
    return np.repeat(X[:, -1:], windows.horizon, axis=1), Y


def historical_average_table(ds: Dataset) -> np.ndarray:
    """Mean training value per (day-of-week, time-of-day) slot, shape (7*T, N, C)."""
    a, b = split_bounds(len(ds.values), ds.ratios)[0]
    T = ds.steps_per_day
    key = ds.dow[a:b] * T + ds.tod[a:b]
    sums = np.zeros((7 * T,) + ds.values.shape[1:])
    counts = np.zeros(7 * T)
    np.add.at(sums, key, ds.values[a:b])
    np.add.at(counts, key, 1)
    table = sums / np.maximum(counts, 1)[:, None, None]
    # slots never seen in training fall back to the time-of-day mean
    unseen = counts == 0
    if unseen.any():
        tod_sums = sums.reshape(7, T, *sums.shape[1:]).sum(axis=0)
        tod_counts = counts.reshape(7, T).sum(axis=0)
        fallback = tod_sums / np.maximum(tod_counts, 1)[:, None, None]
        table[unseen] = fallback[np.flatnonzero(unseen) % T]
    return table


def historical_average_forecast(ds: Dataset, windows: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    table = historical_average_table(ds)
    _, Y, dow, tod = windows.batch()
    key = dow[:, windows.history :] * ds.steps_per_day + tod[:, windows.history :]
    return table[key], Y


def baseline_report(pred_norm, target_norm, stats: NormStats) -> MetricReport:
    return metrics(stats.inverse(pred_norm), stats.inverse(target_norm))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    patience: int = 10
    lr: float = 1e-3
    seed: int = 0
    clip: float | None = None
    max_batches_per_epoch: int | None = None
    eval_batch_size: int = 64


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_mae: float
    best_state: dict[str, np.ndarray]
    seconds: float


def train(model: Forecaster, train_set: WindowSet, val_set: WindowSet, stats: NormStats, cfg: TrainConfig, log=None) -> TrainResult:
    """Mini-batch MAE training with early stopping on validation MAE.

    The model ends holding the parameters of its best validation epoch.
    Training stops once ``patience`` consecutive epochs fail to improve.
    """
    if len(train_set) == 0:
        raise DataError("empty training set")
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_mae, best_epoch, best_state = math.inf, 0, model.state_dict()
    stale = 0
    started = time.perf_counter()
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    if cfg.max_batches_per_epoch is not None:
        n_batches = min(n_batches, cfg.max_batches_per_epoch)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        abs_sum, count = 0.0, 0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            X, Y, dow, tod = train_set.batch(idx)
            pred = model.predict(X, dow, tod)
            loss = loss_mae(pred, Y)
            if not math.isfinite(loss.item()):
                raise NumericError(f"training diverged at epoch {epoch}, batch {b}: loss {loss.item()}")
            backward(loss, params)
            if cfg.clip is not None:
                clip_global_norm(params, cfg.clip)
            adam_step(params, opt)
            abs_sum += float(np.abs(stats.inverse(pred.data) - stats.inverse(Y)).sum())
            count += Y.size
        val = evaluate(model, val_set, stats, cfg.eval_batch_size) if len(val_set) else None
        val_mae = val.mae if val is not None else abs_sum / count
        row = {
            "epoch": epoch,
            "train_mae": abs_sum / count,
            "val_mae": val_mae,
            "val_rmse": val.rmse if val is not None else float("nan"),
            "val_mape": val.mape if val is not None else float("nan"),
            "seconds": time.perf_counter() - t0,
        }
        history.append(row)
        if log is not None:
            log(row)
        if not math.isfinite(val_mae):
            raise NumericError(f"validation error is not finite at epoch {epoch}")
        if val_mae < best_mae:
            best_mae, best_epoch, best_state = val_mae, epoch, model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(history, best_epoch, best_mae, best_state, time.perf_counter() - started)


# ---------------------------------------------------------------------------
# model construction and experiments


@dataclass
class EmbedConfig:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 80
    walks_per_vertex: int = 10
    window: int = 10
    dim: int = 64
    negatives: int = 5
    epochs: int = 5


def vertex_vectors(ds: Dataset, emb: EmbedConfig, seed: int, path=None) -> np.ndarray:
    if path is not None:
        return load_embeddings(path, ds.vertex_ids)
    return node2vec_embed(
        ds.graph, emb.dim, emb.p, emb.q, emb.walk_length, emb.walks_per_vertex, emb.window, emb.negatives, emb.epochs, seed
    )


def model_config_for(ds: Dataset, walk_dim: int, **overrides) -> ModelConfig:
    base = dict(
        n_vertices=ds.n_vertices,
        channels=ds.channels,
        history=ds.history,
        horizon=ds.horizon,
        steps_per_day=ds.steps_per_day,
        walk_dim=walk_dim,
    )
    base.update(overrides)
    return ModelConfig(**base)


def run_fault_experiment(model: Forecaster, windows: WindowSet, stats: NormStats, etas=DEFAULT_ETAS, seed: int = 0, batch_size: int = 64):
    """Evaluate with a fraction ``eta`` of every history input zeroed.

    Returns ``[(eta, MetricReport), ...]``.
    """
    rows = []
    for k, eta in enumerate(etas):
        def transform(X, batch_index, eta=eta, k=k):
            ss = np.random.SeedSequence([seed, k, batch_index])
            return inject_faults(X, eta, int(ss.generate_state(1)[0]))

        rows.append((float(eta), evaluate(model, windows, stats, batch_size, transform)))
    return rows


@dataclass
class AblationResult:
    """``step_mae[variant]`` has shape (n_seeds, Q); test MAE in original units."""

    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    step_mae: dict[str, np.ndarray]
    models: dict = field(default_factory=dict)

    def mean_step_mae(self, variant: str) -> np.ndarray:
        return self.step_mae[variant].mean(axis=0)

    def rows(self):
        for v in self.variants:
            for q, mae in enumerate(self.mean_step_mae(v), start=1):
                yield (v, q, mae)


def run_ablation(
    ds: Dataset,
    model_overrides: dict,
    train_cfg: TrainConfig,
    seeds=(0, 1, 2),
    variants=VARIANTS,
    emb: EmbedConfig | None = None,
    keep_models: bool = False,
    log=None,
) -> AblationResult:
    """Train every variant under the same data, seeds and budget."""
    emb = emb or EmbedConfig()
    train_set, val_set, test_set = ds.windows("train"), ds.windows("val"), ds.windows("test")
    table = {v: [] for v in variants}
    models = {}
    for seed in seeds:
        vectors = vertex_vectors(ds, emb, seed)
        for v in variants:
            cfg = model_config_for(ds, emb.dim, **{**model_overrides, "variant": v, "seed": seed})
            model = Forecaster(cfg, vectors)
            tc = TrainConfig(**{**vars(train_cfg), "seed": seed})
            train(model, train_set, val_set, ds.stats, tc)
            report = evaluate(model, test_set, ds.stats, tc.eval_batch_size)
            table[v].append(report.step_mae)
            if log is not None:
                log({"seed": seed, "variant": v, "mae": report.mae})
            if keep_models:
                models[(v, seed)] = model
    return AblationResult(tuple(variants), tuple(seeds), {v: np.array(r) for v, r in table.items()}, models)


def model_gradient_check(
    n_vertices: int = 6,
    history: int = 4,
    horizon: int = 4,
    blocks: int = 1,
    heads: int = 2,
    head_dim: int = 4,
    channels: int = 1,
    batch: int = 2,
    per_param: int = 6,
    min_coords: int = 200,
    step: float = 3e-4,
    seed: int = 0,
    **overrides,
) -> dict:
    """Central-difference check of the MAE loss over every parameter tensor.

    Uses random inputs, embeddings and a small untrained model; returns the
    report of ``finite_difference_report``. The default step balances
    round-off (which grows like 1/step on the tiny gradients of deep
    parameters) against truncation error.
    """
    rng = np.random.default_rng(seed)
    steps_per_day = 24
    walk_dim = 8
    cfg = ModelConfig(
        n_vertices=n_vertices,
        channels=channels,
        history=history,
        horizon=horizon,
        blocks=blocks,
        heads=heads,
        head_dim=head_dim,
        steps_per_day=steps_per_day,
        walk_dim=walk_dim,
        seed=seed,
        **overrides,
    )
    model = Forecaster(cfg, rng.normal(size=(n_vertices, walk_dim)))
    X = rng.normal(size=(batch, history, n_vertices, channels))
    Y = rng.normal(size=(batch, horizon, n_vertices, channels))
    start = rng.integers(0, 7 * steps_per_day, size=batch)
    t = start[:, None] + np.arange(history + horizon)
    dow, tod = (t // steps_per_day) % 7, t % steps_per_day
    return finite_difference_report(
        lambda: loss_mae(model.predict(X, dow, tod), Y),
        model.parameters(),
        step=step,
        per_param=per_param,
        min_coords=min_coords,
        seed=seed,
    )
