"""Functional training engine.

Executes the numeric side of one training step: embedding lookups with
sum pooling, bottom MLP over dense features, feature interaction by
concatenation, top MLP to a logistic output, binary cross-entropy loss,
and plain SGD.  Embedding gradients are sparse: each looked-up row
receives its lookup multiplicity times the pooled-vector gradient.

The relaxed lookup path is also here: a batch's pooled sums may be
computed against pre-update tables while the previous batch is still in
flight, then corrected with the previous batch's row gradients.  By
linearity of sum pooling the corrected result equals the plain lookup
on updated tables; ``relaxed_partial`` / ``relaxed_correct`` implement
the two halves and tests pin the equivalence.

All state arrays share one dtype (float32 by default; float64 for
gradient checking).  Row updates go through ``apply_row_update`` so any
other component that replays an update reproduces the same bits.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .workload import ModelConfig, SparseBatch

SNAPSHOT_MAGIC = b"TCXLSNAP"
SNAPSHOT_VERSION = 1


class EngineError(ValueError):
    """Raised for malformed state or snapshot data."""


@dataclass
class TrainState:
    """All trainable parameters of one model."""

    cfg: ModelConfig
    tables: list[np.ndarray]        # num_tables arrays of (rows, dim)
    bottom_w: list[np.ndarray]      # (in, out) per layer
    bottom_b: list[np.ndarray]
    top_w: list[np.ndarray]
    top_b: list[np.ndarray]
    dtype: np.dtype = np.dtype(np.float32)


@dataclass
class TrainInfo:
    """Per-step outputs needed by schedulers and checkpoint logic."""

    loss: float
    prediction: float
    emb_grads: list[tuple[np.ndarray, np.ndarray]]  # (sorted rows, (k, dim))


def init_state(cfg: ModelConfig, seed: int,
               dtype=np.float32) -> TrainState:
    """Deterministic initial parameters: N(0, 0.1) embedding rows,
    He-scaled MLP weights, zero biases."""
    dt = np.dtype(dtype)
    rng = np.random.default_rng([seed, 1])
    tables = [rng.normal(0.0, 0.1, (cfg.rows_per_table, cfg.feature_dim))
              .astype(dt) for _ in range(cfg.num_tables)]

    def mk_mlp(dims):
        ws, bs = [], []
        for a, b in zip(dims, dims[1:]):
            ws.append((rng.normal(0.0, 1.0, (a, b))
                       * np.sqrt(2.0 / a)).astype(dt))
            bs.append(np.zeros(b, dtype=dt))
        return ws, bs

    bw, bb = mk_mlp(cfg.bottom_mlp_layers)
    tw, tb = mk_mlp(cfg.top_mlp_layers)
    return TrainState(cfg, tables, bw, bb, tw, tb, dt)


# --- forward / backward -----------------------------------------------------

def lookup_reduce(table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sum-pool looked-up rows (duplicates count each time)."""
    if len(idx) == 0:
        return np.zeros(table.shape[1], dtype=table.dtype)
    return table[idx].sum(axis=0)


def reduce_all(state: TrainState, batch: SparseBatch) -> list[np.ndarray]:
    return [lookup_reduce(tab, ix)
            for tab, ix in zip(state.tables, batch.indices)]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(state: TrainState, batch: SparseBatch,
            reduced: list[np.ndarray] | None = None):
    """Returns (prediction, cache).  ``reduced`` lets callers substitute
    pooled sums computed elsewhere (the relaxed path)."""
    dt = state.dtype
    h = batch.dense.astype(dt)
    bot_acts = [h]
    for i, (w, b) in enumerate(zip(state.bottom_w, state.bottom_b)):
        z = h @ w + b
        h = np.maximum(z, 0) if i < len(state.bottom_w) - 1 else z
        bot_acts.append(h)
    bottom_out = h

    if reduced is None:
        reduced = reduce_all(state, batch)
    x = np.concatenate([bottom_out] + list(reduced)).astype(dt)

    top_acts = [x]
    h = x
    for i, (w, b) in enumerate(zip(state.top_w, state.top_b)):
        z = h @ w + b
        if i < len(state.top_w) - 1:
            h = np.maximum(z, 0)
        else:
            h = _sigmoid(z)
        top_acts.append(h)
    p = float(h[0])
    cache = dict(bot_acts=bot_acts, top_acts=top_acts, reduced=reduced)
    return p, cache


def bce_loss(p: float, y: float) -> float:
    eps = 1e-12
    p = min(max(p, eps), 1.0 - eps)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def loss(state: TrainState, batch: SparseBatch) -> float:
    p, _ = forward(state, batch)
    return bce_loss(p, batch.label)


def backward(state: TrainState, batch: SparseBatch, cache, p: float):
    """Gradients of BCE w.r.t. every parameter.

    Returns (mlp_grads, emb_grads); mlp_grads mirrors the weight lists,
    emb_grads holds per-table (sorted unique rows, per-row gradients).
    """
    dt = state.dtype
    y = batch.label
    # logistic output + BCE collapses to (p - y) at the logit
    dz = np.array([p - y], dtype=dt)

    top_acts = cache["top_acts"]
    d_top_w, d_top_b = [], []
    grad = dz
    for i in range(len(state.top_w) - 1, -1, -1):
        a_prev = top_acts[i]
        d_top_w.append(np.outer(a_prev, grad).astype(dt))
        d_top_b.append(grad.astype(dt))
        grad = state.top_w[i] @ grad
        if i > 0:
            grad = grad * (top_acts[i] > 0)
    d_top_w.reverse()
    d_top_b.reverse()
    d_interaction = grad

    dim = state.cfg.feature_dim
    d_bottom_out = d_interaction[:dim]
    d_reduced = [d_interaction[dim * (t + 1): dim * (t + 2)]
                 for t in range(state.cfg.num_tables)]

    bot_acts = cache["bot_acts"]
    d_bot_w, d_bot_b = [], []
    grad = d_bottom_out
    for i in range(len(state.bottom_w) - 1, -1, -1):
        a_prev = bot_acts[i]
        d_bot_w.append(np.outer(a_prev, grad).astype(dt))
        d_bot_b.append(grad.astype(dt))
        grad = state.bottom_w[i] @ grad
        if i > 0:
            grad = grad * (bot_acts[i] > 0)
    d_bot_w.reverse()
    d_bot_b.reverse()

    emb_grads = []
    for t in range(state.cfg.num_tables):
        rows, counts = np.unique(batch.indices[t], return_counts=True)
        g = counts.astype(dt)[:, None] * d_reduced[t][None, :]
        emb_grads.append((rows, g.astype(dt)))

    mlp_grads = dict(bottom_w=d_bot_w, bottom_b=d_bot_b,
                     top_w=d_top_w, top_b=d_top_b)
    return mlp_grads, emb_grads


# --- updates ----------------------------------------------------------------

def apply_row_update(values: np.ndarray, grads: np.ndarray,
                     lr: float) -> np.ndarray:
    """The one row-update kernel: new = old - lr * grad, in the rows'
    dtype.  Everything that replays an update must call this."""
    return values - values.dtype.type(lr) * grads


def apply_update(state: TrainState,
                 emb_grads: list[tuple[np.ndarray, np.ndarray]],
                 lr: float) -> None:
    """In-place sparse SGD on the tables; untouched rows keep their bits."""
    for tab, (rows, g) in zip(state.tables, emb_grads):
        if len(rows):
            tab[rows] = apply_row_update(tab[rows], g, lr)


def sgd_mlp(state: TrainState, mlp_grads, lr: float) -> None:
    dt = state.dtype
    lr = dt.type(lr)
    for w, g in zip(state.bottom_w, mlp_grads["bottom_w"]):
        w -= lr * g
    for b, g in zip(state.bottom_b, mlp_grads["bottom_b"]):
        b -= lr * g
    for w, g in zip(state.top_w, mlp_grads["top_w"]):
        w -= lr * g
    for b, g in zip(state.top_b, mlp_grads["top_b"]):
        b -= lr * g


def train_batch(state: TrainState, batch: SparseBatch,
                reduced: list[np.ndarray] | None = None,
                apply_emb: bool = True) -> TrainInfo:
    """One full step: forward, backward, MLP update, embedding update.

    ``apply_emb=False`` leaves the tables untouched for callers that
    route the row update through a store sharing the same arrays.
    """
    p, cache = forward(state, batch, reduced=reduced)
    mlp_grads, emb_grads = backward(state, batch, cache, p)
    lr = state.cfg.learning_rate
    sgd_mlp(state, mlp_grads, lr)
    if apply_emb:
        apply_update(state, emb_grads, lr)
    return TrainInfo(loss=bce_loss(p, batch.label), prediction=p,
                     emb_grads=emb_grads)


# --- relaxed lookup ---------------------------------------------------------

def relaxed_partial(state: TrainState,
                    batch: SparseBatch) -> list[np.ndarray]:
    """Pooled sums for ``batch`` against the current (pre-update)
    tables.  Call before the in-flight batch's embedding update."""
    return reduce_all(state, batch)


def relaxed_correct(partial: list[np.ndarray], batch: SparseBatch,
                    prev_emb_grads: list[tuple[np.ndarray, np.ndarray]],
                    lr: float) -> list[np.ndarray]:
    """Patch stale pooled sums for the previous batch's row updates.

    Each draw of ``batch`` that hit an updated row contributes
    -lr * that row's gradient once per draw; by linearity the result
    equals pooling over the updated tables.
    """
    out = []
    for part, idx, (rows, g) in zip(partial, batch.indices, prev_emb_grads):
        corrected = part.copy()
        if len(rows):
            pos = np.searchsorted(rows, idx)
            pos_c = np.minimum(pos, len(rows) - 1)
            mask = rows[pos_c] == idx
            if mask.any():
                corr = g[pos_c[mask]].sum(axis=0)
                corrected = corrected - part.dtype.type(lr) * corr.astype(part.dtype)
        out.append(corrected)
    return out


# --- serialization ----------------------------------------------------------

def config_hash(cfg: ModelConfig) -> bytes:
    """16-byte digest of the model shape; guards snapshot compatibility."""
    payload = json.dumps({
        "name": cfg.name, "feature_dim": cfg.feature_dim,
        "num_dense": cfg.num_dense, "num_tables": cfg.num_tables,
        "lookups_per_table": cfg.lookups_per_table,
        "rows_per_table": cfg.rows_per_table,
        "bottom": list(cfg.bottom_mlp_layers),
        "top": list(cfg.top_mlp_layers),
    }, sort_keys=True).encode()
    return hashlib.sha256(payload).digest()[:16]


def serialize_mlp(state: TrainState) -> bytes:
    """Flat little-endian float32 image of all MLP parameters, in
    declaration order (bottom weights+bias per layer, then top)."""
    parts = []
    for w, b in zip(state.bottom_w, state.bottom_b):
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    for w, b in zip(state.top_w, state.top_b):
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    return b"".join(parts)


def deserialize_mlp(state: TrainState, data: bytes) -> None:
    """Inverse of ``serialize_mlp``; loads into ``state`` in place."""
    expect = 4 * state.cfg.mlp_param_count
    if len(data) != expect:
        raise EngineError(
            f"MLP image is {len(data)} bytes, expected {expect}")
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(data[off:off + n], dtype="<f4").reshape(shape)
        off += n
        return arr.astype(state.dtype)

    for i, (w, b) in enumerate(zip(state.bottom_w, state.bottom_b)):
        state.bottom_w[i] = take(w.shape)
        state.bottom_b[i] = take(b.shape)
    for i, (w, b) in enumerate(zip(state.top_w, state.top_b)):
        state.top_w[i] = take(w.shape)
        state.top_b[i] = take(b.shape)


def save_snapshot(path, state: TrainState) -> None:
    """Snapshot file: magic, version, config digest, raw float32 tables
    in order, then the MLP image."""
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<I", SNAPSHOT_VERSION))
        f.write(config_hash(state.cfg))
        for tab in state.tables:
            f.write(tab.astype("<f4").tobytes())
        f.write(serialize_mlp(state))


def load_snapshot(path, cfg: ModelConfig, dtype=np.float32) -> TrainState:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != SNAPSHOT_MAGIC:
        raise EngineError("bad snapshot magic")
    (version,) = struct.unpack("<I", data[8:12])
    if version != SNAPSHOT_VERSION:
        raise EngineError(f"unsupported snapshot version {version}")
    if data[12:28] != config_hash(cfg):
        raise EngineError("snapshot was written for a different model shape")
    dt = np.dtype(dtype)
    off = 28
    tables = []
    for _ in range(cfg.num_tables):
        n = cfg.rows_per_table * cfg.feature_dim * 4
        tab = np.frombuffer(data[off:off + n], dtype="<f4") \
            .reshape(cfg.rows_per_table, cfg.feature_dim).astype(dt)
        tables.append(tab)
        off += n
    state = init_state(cfg, seed=0, dtype=dt)
    state.tables = tables
    deserialize_mlp(state, data[off:off + cfg.mlp_bytes])
    return state


def clone_state(state: TrainState) -> TrainState:
    return TrainState(
        cfg=state.cfg,
        tables=[t.copy() for t in state.tables],
        bottom_w=[w.copy() for w in state.bottom_w],
        bottom_b=[b.copy() for b in state.bottom_b],
        top_w=[w.copy() for w in state.top_w],
        top_b=[b.copy() for b in state.top_b],
        dtype=state.dtype,
    )


def states_equal(a: TrainState, b: TrainState) -> bool:
    """Bitwise parameter equality."""
    arrays = lambda s: (s.tables + s.bottom_w + s.bottom_b
                        + s.top_w + s.top_b)
    return all(x.dtype == y.dtype and np.array_equal(x, y)
               for x, y in zip(arrays(a), arrays(b)))
