"""Vertex and calendar embeddings and their sum, the spatio-temporal code.

Vertex vectors come from second-order biased random walks fed to a
skip-gram model with negative sampling. They stay frozen; a two-layer
projector maps them to the model width and trains with the model.
"""

from __future__ import annotations

import csv
import logging
import warnings
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add, reshape
from .errors import DataError, ParseError
from .graph import RoadGraph
from .layers import Module, TwoLayer

logger = logging.getLogger(__name__)

DAYS_PER_WEEK = 7


def _transition_table(graph: RoadGraph):
    adj = graph.adjacency
    nbrs, wts = [], []
    for i in range(graph.n_vertices):
        row = adj[i].copy()
        row[i] = 0.0
        idx = np.flatnonzero(row > 0)
        nbrs.append(idx)
        wts.append(row[idx])
    return nbrs, wts


def transition_probabilities(graph: RoadGraph, prev: int | None, cur: int, p: float, q: float):
    """Next-vertex law for a walk at ``cur`` that arrived from ``prev``.

    Returns ``(neighbours, probabilities)``. Weight of neighbour ``x`` is
    the edge weight times 1/p if x is ``prev``, 1 if x links to ``prev``,
    and 1/q otherwise.
    """
    nbrs, wts = _transition_table(graph)
    return _step_law(graph.adjacency, nbrs[cur], wts[cur], prev, p, q)


def _step_law(adj, nb, w, prev, p, q):
    if nb.size == 0:
        return nb, w
    if prev is None:
        return nb, w / w.sum()
    bias = np.where(nb == prev, 1.0 / p, np.where(adj[nb, prev] > 0, 1.0, 1.0 / q))
    w = w * bias
    return nb, w / w.sum()


def node2vec_walks(
    graph: RoadGraph,
    p: float = 1.0,
    q: float = 1.0,
    walk_length: int = 80,
    walks_per_vertex: int = 10,
    seed: int = 0,
) -> list[list[int]]:
    """Biased random walks, ``walks_per_vertex`` from every vertex.

    Walks hold vertex positions (indices into ``graph.vertex_ids``). A walk
    stops early at a vertex without outgoing edges.
    """
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    if walk_length < 1 or walks_per_vertex < 1:
        raise ValueError("walk_length and walks_per_vertex must be positive")
    adj = graph.adjacency
    nbrs, wts = _transition_table(graph)
    cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def law(prev, cur):
        key = (prev, cur)
        if key not in cache:
            nb, pr = _step_law(adj, nbrs[cur], wts[cur], prev, p, q)
            cache[key] = (nb, np.cumsum(pr))
        return cache[key]

    walks = []
    streams = np.random.SeedSequence(seed).spawn(graph.n_vertices)
    for start, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        for _ in range(walks_per_vertex):
            walk = [start]
            prev = None
            while len(walk) < walk_length:
                cur = walk[-1]
                nb, cdf = law(prev, cur)
                if nb.size == 0:
                    break
                k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                walk.append(int(nb[min(k, nb.size - 1)]))
                prev = cur
            walks.append(walk)
    return walks


def _context_pairs(walks, window: int):
    centers, contexts = [], []
    for walk in walks:
        w = np.asarray(walk)
        n = w.size
        for off in range(1, window + 1):
            if off >= n:
                break
            centers += [w[:-off], w[off:]]
            contexts += [w[off:], w[:-off]]
    if not centers:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    return np.concatenate(centers), np.concatenate(contexts)


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def skipgram_train(
    walks,
    n_vertices: int,
    window: int = 10,
    dim: int = 64,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
    lr: float = 0.025,
    batch_size: int = 128,
) -> np.ndarray:
    """Skip-gram with negative sampling over walk co-occurrences.

    Mini-batch SGD with a linearly decaying learning rate; each row update
    is averaged over its occurrences in the batch. Vertices that never
    form a (center, context) pair get a zero vector.
    """
    if not walks:
        raise DataError("no walks to train on")
    rng = np.random.default_rng(seed)
    centers, contexts = _context_pairs(walks, window)
    counts = np.bincount(np.concatenate([np.asarray(w) for w in walks]), minlength=n_vertices)
    emb = (rng.random((n_vertices, dim)) - 0.5) / dim
    out = np.zeros((n_vertices, dim))
    trained = np.zeros(n_vertices, dtype=bool)
    trained[centers] = True
    if centers.size:
        noise = counts.astype(np.float64) ** 0.75
        noise /= noise.sum()
        noise_cdf = np.cumsum(noise)
        n_batches = -(-centers.size // batch_size)
        total = epochs * n_batches
        step = 0
        for _ in range(epochs):
            order = rng.permutation(centers.size)
            for b in range(n_batches):
                sel = order[b * batch_size : (b + 1) * batch_size]
                c, o = centers[sel], contexts[sel]
                neg = np.searchsorted(noise_cdf, rng.random((sel.size, negatives)) * noise_cdf[-1])
                neg = np.minimum(neg, n_vertices - 1)
                alpha = lr * max(1e-4, 1.0 - step / total)
                step += 1
                vc = emb[c]
                tgt = np.concatenate([o[:, None], neg], axis=1)
                label = np.zeros(tgt.shape)
                label[:, 0] = 1.0
                uo = out[tgt]
                score = _sig(np.einsum("bd,bkd->bk", vc, uo))
                err = score - label
                g_vc = np.einsum("bk,bkd->bd", err, uo)
                g_uo = err[..., None] * vc[:, None, :]
                g_emb = np.zeros_like(emb)
                g_out = np.zeros_like(out)
                np.add.at(g_emb, c, g_vc)
                np.add.at(g_out, tgt.reshape(-1), g_uo.reshape(-1, dim))
                n_emb = np.bincount(c, minlength=n_vertices)[:, None]
                n_out = np.bincount(tgt.reshape(-1), minlength=n_vertices)[:, None]
                emb -= alpha * g_emb / np.maximum(n_emb, 1)
                out -= alpha * g_out / np.maximum(n_out, 1)
    missing = np.flatnonzero(~trained)
    if missing.size:
        warnings.warn(f"{missing.size} vertices have no walk context; using zero vectors", stacklevel=2)
        emb[missing] = 0.0
    return emb


def node2vec_embed(
    graph: RoadGraph,
    dim: int = 64,
    p: float = 1.0,
    q: float = 1.0,
    walk_length: int = 80,
    walks_per_vertex: int = 10,
    window: int = 10,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
) -> np.ndarray:
    walks = node2vec_walks(graph, p, q, walk_length, walks_per_vertex, seed)
    return skipgram_train(walks, graph.n_vertices, window, dim, negatives, epochs, seed)


def load_embeddings(path, vertex_ids) -> np.ndarray:
    """Read ``vertex_id,v0,...`` rows and order them like ``vertex_ids``."""
    path = Path(path)
    rows = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "vertex_id" or len(header) < 2:
            raise ParseError("expected header vertex_id,v0,...", path, 1)
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ParseError(f"expected {width + 1} fields, got {len(row)}", path, lineno)
            try:
                rows[row[0].strip()] = [float(v) for v in row[1:]]
            except ValueError:
                raise ParseError("non-numeric embedding value", path, lineno) from None
    missing = [v for v in vertex_ids if v not in rows]
    if missing:
        raise DataError(f"{path}: no embedding for vertices {missing[:5]}")
    return np.array([rows[v] for v in vertex_ids], dtype=np.float64)


def save_embeddings(path, vertex_ids, vectors: np.ndarray) -> None:
    from .io import write_csv

    header = ["vertex_id"] + [f"v{i}" for i in range(vectors.shape[1])]
    rows = [[vid] + [repr(float(x)) for x in vec] for vid, vec in zip(vertex_ids, vectors)]
    write_csv(path, header, rows)


def time_onehot(dow, tod, steps_per_day: int) -> np.ndarray:
    """Concatenated day-of-week (7) and time-of-day (T) one-hot codes."""
    dow = np.asarray(dow, dtype=np.intp)
    tod = np.asarray(tod, dtype=np.intp)
    if dow.shape != tod.shape:
        raise ValueError("day-of-week and time-of-day arrays differ in shape")
    if ((dow < 0) | (dow >= DAYS_PER_WEEK)).any():
        raise DataError("day of week outside [0, 7)")
    if ((tod < 0) | (tod >= steps_per_day)).any():
        raise DataError(f"time of day outside [0, {steps_per_day})")
    code = np.zeros(dow.shape + (DAYS_PER_WEEK + steps_per_day,))
    np.put_along_axis(code, dow[..., None], 1.0, axis=-1)
    np.put_along_axis(code, DAYS_PER_WEEK + tod[..., None], 1.0, axis=-1)
    return code


def check_consecutive(dow, tod, steps_per_day: int) -> None:
    """Each step must follow the previous by exactly one slot."""
    dow = np.asarray(dow)
    tod = np.asarray(tod)
    if dow.shape[-1] < 2:
        return
    nxt_tod = (tod[..., :-1] + 1) % steps_per_day
    nxt_dow = (dow[..., :-1] + (nxt_tod == 0)) % DAYS_PER_WEEK
    if not (np.array_equal(nxt_tod, tod[..., 1:]) and np.array_equal(nxt_dow, dow[..., 1:])):
        raise DataError("timestamps are not consecutive steps")


class SpatialEmbedding(Module):
    def __init__(self, raw_vectors: np.ndarray, dim: int, rng: np.random.Generator):
        self.raw = np.asarray(raw_vectors, dtype=np.float64)
        self.projector = TwoLayer(self.raw.shape[1], dim, dim, rng)

    def __call__(self) -> Tensor:
        return self.projector(Tensor(self.raw))


class TemporalEmbedding(Module):
    def __init__(self, steps_per_day: int, dim: int, rng: np.random.Generator):
        self.steps_per_day = steps_per_day
        self.projector = TwoLayer(steps_per_day + DAYS_PER_WEEK, dim, dim, rng)

    def __call__(self, dow, tod) -> Tensor:
        return self.projector(Tensor(time_onehot(dow, tod, self.steps_per_day)))


def build_ste(spatial: SpatialEmbedding, temporal: TemporalEmbedding, dow, tod, check: bool = True) -> Tensor:
    """Spatio-temporal embedding of shape ``(..., S, N, D)``.

    ``dow``/``tod`` have shape ``(..., S)``; the entry for step j and
    vertex i is the spatial row i plus the temporal row j.
    """
    if check:
        check_consecutive(dow, tod, temporal.steps_per_day)
    es = spatial()
    et = temporal(dow, tod)
    et = reshape(et, et.shape[:-1] + (1, et.shape[-1]))
    return add(et, es)
