"""Encoder-decoder forecaster built from attention blocks."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import (
    VARIANTS,
    GroupPartition,
    MultiHeadConfig,
    STAttentionBlock,
    TransformAttention,
    optimal_group_size,
)
from .autodiff import Tensor, as_tensor, getitem, mean, sub, tabs, take
from .embedding import SpatialEmbedding, TemporalEmbedding, build_ste
from .errors import ConfigError, DimensionError, NumericError
from .io import load_arrays, save_arrays
from .layers import Module, TwoLayer, name_parameters

GROUP_AUTO_THRESHOLD = 200
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    n_vertices: int
    channels: int = 1
    history: int = 12
    horizon: int = 12
    blocks: int = 3
    heads: int = 8
    head_dim: int = 8
    steps_per_day: int = 288
    walk_dim: int = 64
    group_mode: str = "auto"  # auto | on | off
    groups: int | None = None
    allow_padding: bool = True
    encoder_causal: bool = True
    decoder_causal: bool = True
    include_self: bool = True
    variant: str = "full"
    bridge: str = "aligned"  # how NTr hands encoder states to the decoder: aligned | last
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("need at least one block per side")
        if self.history < 1 or self.horizon < 1:
            raise ConfigError("history and horizon must be at least 1")
        if min(self.n_vertices, self.channels, self.heads, self.head_dim, self.steps_per_day, self.walk_dim) < 1:
            raise ConfigError("sizes must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.group_mode not in ("auto", "on", "off"):
            raise ConfigError(f"group_mode must be auto, on or off, got {self.group_mode!r}")
        if self.bridge not in ("last", "aligned"):
            raise ConfigError(f"bridge must be last or aligned, got {self.bridge!r}")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def grouped(self) -> bool:
        if self.group_mode == "auto":
            return self.n_vertices > GROUP_AUTO_THRESHOLD
        return self.group_mode == "on"

    @property
    def group_count(self) -> int:
        if self.groups is not None:
            return self.groups
        return math.ceil(self.n_vertices / optimal_group_size(self.n_vertices))

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Forecaster(Module):
    """Input projection, L encoder blocks, a bridge, L decoder blocks, output projection.

    The bridge is transform attention, or for the NTr variant a direct copy
    of encoder states (see ``ModelConfig.bridge``).
    """

    def __init__(self, config: ModelConfig, raw_vectors: np.ndarray):
        raw_vectors = np.asarray(raw_vectors, dtype=np.float64)
        if raw_vectors.shape != (config.n_vertices, config.walk_dim):
            raise DimensionError(
                f"vertex vectors {raw_vectors.shape} do not match ({config.n_vertices}, {config.walk_dim})"
            )
        self.config = config
        rng = np.random.default_rng(config.seed)
        D = config.model_dim
        mh = MultiHeadConfig(config.heads, config.head_dim)
        self.partition = None
        if config.grouped:
            self.partition = GroupPartition.random(
                config.n_vertices, config.group_count, config.seed, config.allow_padding
            )
        self.spatial_embedding = SpatialEmbedding(raw_vectors, D, rng)
        self.temporal_embedding = TemporalEmbedding(config.steps_per_day, D, rng)
        self.input_projection = TwoLayer(config.channels, D, D, rng)
        self.encoder = [
            STAttentionBlock(mh, rng, config.encoder_causal, config.include_self, self.partition, config.variant)
            for _ in range(config.blocks)
        ]
        self.transform = None if config.variant == "NTr" else TransformAttention(mh, rng)
        self.decoder = [
            STAttentionBlock(mh, rng, config.decoder_causal, config.include_self, self.partition, config.variant)
            for _ in range(config.blocks)
        ]
        self.output_projection = TwoLayer(D, D, config.channels, rng)
        name_parameters(self)

    def embed(self, dow, tod, check: bool = True) -> Tensor:
        return build_ste(self.spatial_embedding, self.temporal_embedding, dow, tod, check)

    def _bridge(self, H: Tensor) -> Tensor:
        P, Q = self.config.history, self.config.horizon
        if self.config.bridge == "last":
            idx = np.full(Q, P - 1)
        elif Q <= P:
            idx = np.arange(P - Q, P)
        else:
            idx = np.concatenate([np.arange(P), np.full(Q - P, P - 1)])
        return take(H, idx, -3)

    def encode(self, X, E) -> Tensor:
        cfg = self.config
        X, E = as_tensor(X), as_tensor(E)
        self._check(X, E)
        E_hist = getitem(E, (Ellipsis, slice(0, cfg.history), slice(None), slice(None)))
        H = self.input_projection(X)
        for block in self.encoder:
            H = block(H, E_hist)
        return H

    def forward(self, X, E) -> Tensor:
        """``X``: (..., P, N, C) history, ``E``: (..., P+Q, N, D) embedding -> (..., Q, N, C)."""
        cfg = self.config
        X, E = as_tensor(X), as_tensor(E)
        H = self.encode(X, E)
        E_hist = getitem(E, (Ellipsis, slice(0, cfg.history), slice(None), slice(None)))
        E_fut = getitem(E, (Ellipsis, slice(cfg.history, None), slice(None), slice(None)))
        H = self._bridge(H) if self.transform is None else self.transform(H, E_hist, E_fut)
        for block in self.decoder:
            H = block(H, E_fut)
        return self.output_projection(H)

    __call__ = forward

    def predict(self, X, dow, tod) -> Tensor:
        return self.forward(X, self.embed(dow, tod))

    def _check(self, X: Tensor, E: Tensor):
        cfg = self.config
        want_x = (cfg.history, cfg.n_vertices, cfg.channels)
        want_e = (cfg.history + cfg.horizon, cfg.n_vertices, cfg.model_dim)
        if X.shape[-3:] != want_x or X.ndim < 3:
            raise DimensionError(f"input shape {X.shape} does not end in {want_x}")
        if E.shape[-3:] != want_e or E.shape[:-3] not in ((), X.shape[:-3]):
            raise DimensionError(f"embedding shape {E.shape} does not match (..., {want_e})")


def loss_mae(pred, target) -> Tensor:
    """Mean absolute error over every entry."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    if not (np.isfinite(pred.data).all() and np.isfinite(target.data).all()):
        raise NumericError("non-finite value in loss input")
    return mean(tabs(sub(pred, target)))


def ablation_variant(model: Forecaster, which: str) -> Forecaster:
    """Fresh model of the same configuration with one component removed."""
    if which not in VARIANTS or which == "full":
        raise ConfigError(f"ablation must be one of NS, NT, NG, NTr, got {which!r}")
    return Forecaster(model.config.replace(variant=which), model.spatial_embedding.raw)


def save_checkpoint(model: Forecaster, path, extra: dict | None = None) -> None:
    arrays = {f"param/{name}": p.data for name, p in model.named_parameters()}
    arrays["buffer/raw_spatial"] = model.spatial_embedding.raw
    if model.partition is not None:
        arrays["buffer/partition_slots"] = model.partition.slots
    meta = {
        "format": CHECKPOINT_FORMAT,
        "kind": "checkpoint",
        "config": model.config.to_dict(),
        "partition_seed": model.partition.seed if model.partition is not None else None,
        "extra": extra or {},
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path) -> tuple[Forecaster, dict]:
    arrays, meta = load_arrays(Path(path))
    if meta.get("kind") != "checkpoint":
        raise ConfigError(f"{path} is not a model checkpoint")
    config = ModelConfig(**meta["config"])
    model = Forecaster(config, arrays["buffer/raw_spatial"])
    if model.partition is not None:
        if not np.array_equal(model.partition.slots, arrays["buffer/partition_slots"]):
            raise ConfigError("stored group partition does not match the recorded seed")
    model.load_state_dict({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, meta.get("extra", {})
