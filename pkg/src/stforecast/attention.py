"""Multi-head attention over vertices, over time, and from future to past steps.

Hidden states and embeddings use the layout ``(..., S, N, D)``: any
leading batch axes, then time steps, vertices and features. Every
projection is a ReLU dense layer producing ``D = K * d`` features that are
split into ``K`` heads of width ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    amax,
    as_tensor,
    concat_lastdim,
    matmul,
    mul,
    reshape,
    sigmoid,
    softmax_lastdim,
    sub,
    swapaxes,
    take,
)
from .errors import DimensionError, PartitionError
from .layers import Dense, Module, glorot

VARIANTS = ("full", "NS", "NT", "NG", "NTr")


@dataclass(frozen=True)
class MultiHeadConfig:
    heads: int
    head_dim: int

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., L, K*d) -> (..., K, L, d)
    *lead, length, width = x.shape
    x = reshape(x, (*lead, length, heads, width // heads))
    return swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., K, L, d) -> (..., L, K*d)
    x = swapaxes(x, -2, -3)
    *lead, length, heads, d = x.shape
    return reshape(x, (*lead, length, heads * d))


def attend(query: Tensor, key: Tensor, value: Tensor, heads: int, mask=None):
    """Scaled dot-product attention along axis -2, per head.

    ``mask`` broadcasts against the score tensor ``(..., K, Lq, Lk)``.
    Returns the concatenated head outputs and the weights as an array.
    """
    d = query.shape[-1] // heads
    q = _split_heads(query, heads)
    k = _split_heads(key, heads)
    v = _split_heads(value, heads)
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    weights = softmax_lastdim(scores, mask)
    return _merge_heads(matmul(weights, v)), weights.data


def _check_aligned(H: Tensor, E: Tensor, what: str):
    if H.shape[-3:] != E.shape[-3:] or H.ndim < 3:
        raise DimensionError(f"{what}: hidden state {H.shape} and embedding {E.shape} are not aligned")


class SpatialAttention(Module):
    """Each vertex attends to every vertex at the same time step.

    Scores use hidden state concatenated with the embedding; values use
    the hidden state alone.
    """

    def __init__(self, cfg: MultiHeadConfig, rng: np.random.Generator):
        D = cfg.model_dim
        self.cfg = cfg
        self.query = Dense(2 * D, D, rng)
        self.key = Dense(2 * D, D, rng)
        self.value = Dense(D, D, rng)

    def __call__(self, H, E, mask=None, return_weights: bool = False):
        H, E = as_tensor(H), as_tensor(E)
        _check_aligned(H, E, "spatial attention")
        x = concat_lastdim([H, E])
        out, w = attend(self.query(x), self.key(x), self.value(H), self.cfg.heads, mask)
        self.score_count = w.shape[-1] * w.shape[-2]
        return (out, w) if return_weights else out


def causal_mask(steps: int, include_self: bool = True) -> np.ndarray:
    """``mask[j, t]`` is True when step j may look at step t.

    Without ``include_self`` a step sees only strictly earlier steps, except
    the first step which has nothing else to see.
    """
    m = np.tril(np.ones((steps, steps), dtype=bool), 0 if include_self else -1)
    m[0, 0] = True
    return m


class TemporalAttention(Module):
    """Each (vertex, step) attends to steps of the same vertex."""

    def __init__(self, cfg: MultiHeadConfig, rng: np.random.Generator, causal: bool = True, include_self: bool = True):
        D = cfg.model_dim
        self.cfg = cfg
        self.causal = causal
        self.include_self = include_self
        self.query = Dense(2 * D, D, rng)
        self.key = Dense(2 * D, D, rng)
        self.value = Dense(D, D, rng)

    def __call__(self, H, E, return_weights: bool = False):
        H, E = as_tensor(H), as_tensor(E)
        _check_aligned(H, E, "temporal attention")
        Ht = swapaxes(H, -2, -3)
        x = concat_lastdim([Ht, swapaxes(E, -2, -3)])
        mask = causal_mask(H.shape[-3], self.include_self) if self.causal else None
        out, w = attend(self.query(x), self.key(x), self.value(Ht), self.cfg.heads, mask)
        out = swapaxes(out, -2, -3)
        return (out, w) if return_weights else out


class TransformAttention(Module):
    """Maps encoder states at P history steps onto Q future steps.

    Weights compare future-step embeddings with history-step embeddings
    only; encoder states enter solely as values.
    """

    def __init__(self, cfg: MultiHeadConfig, rng: np.random.Generator):
        D = cfg.model_dim
        self.cfg = cfg
        self.query = Dense(D, D, rng)
        self.key = Dense(D, D, rng)
        self.value = Dense(D, D, rng)

    def __call__(self, H_enc, E_hist, E_fut, return_weights: bool = False):
        H_enc, E_hist, E_fut = as_tensor(H_enc), as_tensor(E_hist), as_tensor(E_fut)
        if H_enc.shape[-3] == 0:
            raise DimensionError("transform attention needs at least one history step")
        _check_aligned(H_enc, E_hist, "transform attention")
        if E_fut.shape[-2:] != E_hist.shape[-2:]:
            raise DimensionError(f"future embedding {E_fut.shape} does not match history {E_hist.shape}")
        q = self.query(swapaxes(E_fut, -2, -3))
        k = self.key(swapaxes(E_hist, -2, -3))
        v = self.value(swapaxes(H_enc, -2, -3))
        out, w = attend(q, k, v, self.cfg.heads)
        out = swapaxes(out, -2, -3)
        return (out, w) if return_weights else out


class GatedFusion(Module):
    """``z * HS + (1 - z) * HT`` with ``z = sigmoid(HS Wz1 + HT Wz2 + bz)``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.W_spatial = Parameter(glorot(rng, dim, dim))
        self.W_temporal = Parameter(glorot(rng, dim, dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, HS, HT, return_gate: bool = False):
        HS, HT = as_tensor(HS), as_tensor(HT)
        if HS.shape != HT.shape:
            raise DimensionError(f"gated fusion: {HS.shape} vs {HT.shape}")
        z = sigmoid(add(add(matmul(HS, self.W_spatial), matmul(HT, self.W_temporal)), self.bias))
        out = add(mul(z, HS), mul(sub(1.0, z), HT))
        return (out, z.data) if return_gate else out


# ---------------------------------------------------------------------------
# grouped spatial attention


def group_score_count(n_vertices: int, group_size: float) -> float:
    """Attention scores per time step for groups of the given size."""
    return n_vertices * group_size + (n_vertices / group_size) ** 2


def optimal_group_size(n_vertices: int) -> int:
    """Integer group size minimising ``N*M + (N/M)^2``; ties go to the smaller M.

    Any M is admissible because groups are padded to equal size.
    """
    if n_vertices < 1:
        raise ValueError("need at least one vertex")
    best, best_cost = 1, math.inf
    for m in range(1, n_vertices + 1):
        cost = group_score_count(n_vertices, m)
        if cost < best_cost:
            best, best_cost = m, cost
    return best


@dataclass(frozen=True)
class GroupPartition:
    """Random assignment of vertices to ``groups`` slots of equal size.

    ``slots[g, m]`` is a vertex index or -1 for a padding slot. Padding is
    spread so that no group holds more than one padding slot.
    """

    n_vertices: int
    groups: int
    seed: int
    slots: np.ndarray

    @classmethod
    def random(cls, n_vertices: int, groups: int, seed: int = 0, allow_padding: bool = True) -> GroupPartition:
        if not 1 <= groups <= n_vertices:
            raise PartitionError(f"need 1 <= groups <= {n_vertices}, got {groups}")
        if n_vertices % groups and not allow_padding:
            raise PartitionError(f"{groups} groups do not divide {n_vertices} vertices and padding is disabled")
        size = -(-n_vertices // groups)
        order = np.random.default_rng(seed).permutation(n_vertices)
        full_groups = n_vertices - groups * (size - 1)
        slots = np.full((groups, size), -1, dtype=np.intp)
        pos = 0
        for g in range(groups):
            take_n = size if g < full_groups else size - 1
            slots[g, :take_n] = order[pos : pos + take_n]
            pos += take_n
        slots.setflags(write=False)
        return cls(n_vertices, groups, seed, slots)

    @property
    def group_size(self) -> int:
        return self.slots.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.slots >= 0

    def gather_index(self) -> np.ndarray:
        return np.where(self.valid, self.slots, 0).reshape(-1)

    def scatter_index(self) -> np.ndarray:
        """Flat slot position of each vertex."""
        flat = self.slots.reshape(-1)
        pos = np.empty(self.n_vertices, dtype=np.intp)
        real = np.flatnonzero(flat >= 0)
        pos[flat[real]] = real
        return pos

    def group_of(self) -> np.ndarray:
        return self.scatter_index() // self.group_size


class GroupSpatialAttention(Module):
    """Attention inside each group, then between max-pooled group summaries.

    A vertex's output is its intra-group feature plus its group's
    inter-group feature. Group keys pool the members' embeddings the same
    way as their features.
    """

    def __init__(self, cfg: MultiHeadConfig, partition: GroupPartition, rng: np.random.Generator):
        self.cfg = cfg
        self.partition = partition
        self.intra = SpatialAttention(cfg, rng)
        self.inter = SpatialAttention(cfg, rng)

    def __call__(self, H, E, return_parts: bool = False):
        H, E = as_tensor(H), as_tensor(E)
        _check_aligned(H, E, "group spatial attention")
        part = self.partition
        if H.shape[-2] != part.n_vertices:
            raise DimensionError(f"partition covers {part.n_vertices} vertices, input has {H.shape[-2]}")
        G, M = part.slots.shape
        gather = part.gather_index()
        lead = H.shape[:-2]
        D = H.shape[-1]
        Hg = reshape(take(H, gather, -2), (*lead, G, M, D))
        Eg = reshape(take(E, gather, -2), (*lead, G, M, D))
        valid = part.valid
        local, w_intra = self.intra(Hg, Eg, mask=valid[:, None, None, :], return_weights=True)
        pad = np.where(valid, 0.0, -np.inf)[:, :, None]
        pooled = amax(add(local, pad), axis=-2)
        pooled_e = amax(add(Eg, pad), axis=-2)
        glob, w_inter = self.inter(pooled, pooled_e, return_weights=True)
        out = add(local, reshape(glob, (*lead, G, 1, D)))
        out = take(reshape(out, (*lead, G * M, D)), part.scatter_index(), -2)
        # scores per time step and head, read off the score tensors themselves
        self.score_count = w_intra.shape[-4] * w_intra.shape[-2] * w_intra.shape[-1] + w_inter.shape[-2] * w_inter.shape[-1]
        if return_parts:
            local_v = take(reshape(local, (*lead, G * M, D)), part.scatter_index(), -2)
            return out, {"local": local_v, "global": glob, "intra_weights": w_intra, "inter_weights": w_inter}
        return out


# ---------------------------------------------------------------------------
# block


class STAttentionBlock(Module):
    """Spatial and temporal attention fused by a gate, plus a residual path.

    ``variant`` drops a component: "NS" (no spatial), "NT" (no temporal),
    "NG" (plain mean instead of the gate). "full" and "NTr" keep all three.
    """

    def __init__(
        self,
        cfg: MultiHeadConfig,
        rng: np.random.Generator,
        causal: bool = True,
        include_self: bool = True,
        partition: GroupPartition | None = None,
        variant: str = "full",
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.spatial = None
        self.temporal = None
        self.fusion = None
        if variant != "NS":
            self.spatial = (
                GroupSpatialAttention(cfg, partition, rng) if partition is not None else SpatialAttention(cfg, rng)
            )
        if variant != "NT":
            self.temporal = TemporalAttention(cfg, rng, causal=causal, include_self=include_self)
        if variant in ("full", "NTr"):
            self.fusion = GatedFusion(cfg.model_dim, rng)

    def __call__(self, H, E):
        H = as_tensor(H)
        HS = self.spatial(H, E) if self.spatial is not None else None
        HT = self.temporal(H, E) if self.temporal is not None else None
        if HS is None:
            fused = HT
        elif HT is None:
            fused = HS
        elif self.fusion is None:
            fused = mul(add(HS, HT), 0.5)
        else:
            fused = self.fusion(HS, HT)
        return add(H, fused)
