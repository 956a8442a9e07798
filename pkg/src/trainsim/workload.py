"""Model shapes and sparse training-batch generation.

A model is a set of embedding tables plus a bottom MLP over dense
features and a top MLP over the feature interaction.  A batch carries
per-table lookup index lists, one dense vector and one label; index
streams follow a bounded zipf popularity law, with an optional
controlled reuse rate against the previous batch so consecutive batches
share a tunable fraction of rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class WorkloadError(ValueError):
    """Raised for invalid model configurations or batch parameters."""


@dataclass(frozen=True)
class ModelConfig:
    """Shape of one recommendation model.

    ``bottom_mlp_layers`` runs num_dense -> ... -> feature_dim so the
    dense path lands in the same space as a pooled embedding;
    ``top_mlp_layers`` consumes the interaction vector and ends in one
    logit.
    """

    name: str
    feature_dim: int
    num_dense: int
    num_tables: int
    lookups_per_table: int
    bottom_mlp_layers: tuple[int, ...]
    top_mlp_layers: tuple[int, ...]
    rows_per_table: int = 10_000
    learning_rate: float = 0.01
    batch_size: int = 64

    def __post_init__(self) -> None:
        if min(self.feature_dim, self.num_dense, self.num_tables,
               self.lookups_per_table, self.rows_per_table) < 1:
            raise WorkloadError(f"{self.name}: dimensions must be >= 1")
        if len(self.bottom_mlp_layers) < 2 or len(self.top_mlp_layers) < 2:
            raise WorkloadError(f"{self.name}: MLPs need at least two layers")
        if self.bottom_mlp_layers[0] != self.num_dense:
            raise WorkloadError(
                f"{self.name}: bottom MLP input {self.bottom_mlp_layers[0]} "
                f"!= num_dense {self.num_dense}")
        if self.bottom_mlp_layers[-1] != self.feature_dim:
            raise WorkloadError(
                f"{self.name}: bottom MLP output {self.bottom_mlp_layers[-1]} "
                f"!= feature_dim {self.feature_dim}")
        if self.top_mlp_layers[0] != self.interaction_width:
            raise WorkloadError(
                f"{self.name}: top MLP input {self.top_mlp_layers[0]} "
                f"!= interaction width {self.interaction_width}")
        if self.top_mlp_layers[-1] != 1:
            raise WorkloadError(f"{self.name}: top MLP must end in 1 logit")
        if not (0 < self.learning_rate < 1):
            raise WorkloadError(f"{self.name}: learning_rate out of range")
        if self.batch_size < 1:
            raise WorkloadError(f"{self.name}: batch_size must be >= 1")

    @property
    def row_bytes(self) -> int:
        return 4 * self.feature_dim  # float32 rows

    @property
    def interaction_width(self) -> int:
        # pooled vector per table plus the bottom-MLP output, concatenated
        return self.feature_dim * (self.num_tables + 1)

    @property
    def table_bytes(self) -> int:
        return self.num_tables * self.rows_per_table * self.row_bytes

    @property
    def mlp_param_count(self) -> int:
        n = 0
        for dims in (self.bottom_mlp_layers, self.top_mlp_layers):
            for a, b in zip(dims, dims[1:]):
                n += a * b + b
        return n

    @property
    def mlp_bytes(self) -> int:
        return 4 * self.mlp_param_count


# interaction width = feature_dim * (num_tables + 1)
_BUILTIN = {
    "rm1": dict(feature_dim=32, num_dense=13, num_tables=20,
                lookups_per_table=80,
                bottom_mlp_layers=(13, 8192, 2048, 32),
                top_mlp_layers=(672, 256, 64, 1)),
    "rm2": dict(feature_dim=32, num_dense=13, num_tables=80,
                lookups_per_table=80,
                bottom_mlp_layers=(13, 8192, 2048, 32),
                top_mlp_layers=(2592, 512, 128, 1)),
    "rm3": dict(feature_dim=32, num_dense=13, num_tables=20,
                lookups_per_table=20,
                bottom_mlp_layers=(13, 10240, 4096, 32),
                top_mlp_layers=(672, 512, 128, 1)),
    "rm4": dict(feature_dim=16, num_dense=13, num_tables=52,
                lookups_per_table=1,
                bottom_mlp_layers=(13, 16384, 2048, 512, 16),
                top_mlp_layers=(848, 512, 128, 1)),
}


def builtin_config(name: str, **overrides) -> ModelConfig:
    """One of the four reference model shapes (rm1..rm4), with optional
    field overrides."""
    key = name.lower()
    if key not in _BUILTIN:
        raise WorkloadError(
            f"unknown model {name!r}; choose from {sorted(_BUILTIN)}")
    params = dict(_BUILTIN[key], name=key)
    params.update(overrides)
    return ModelConfig(**params)


@dataclass
class SparseBatch:
    """One training step's worth of input.

    ``indices[t]`` holds ``lookups_per_table`` row ids into table ``t``
    (duplicates allowed; pooling sums with multiplicity).
    """

    batch_index: int
    indices: list[np.ndarray]
    dense: np.ndarray
    label: float

    def table_indices(self, t: int) -> np.ndarray:
        return self.indices[t]


def _zipf_cdf(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-s)
    return np.cumsum(w / w.sum())


_CDF_CACHE: dict[tuple[int, float], np.ndarray] = {}


def _zipf_draw(rng: np.random.Generator, n: int, s: float,
               size: int) -> np.ndarray:
    key = (n, s)
    cdf = _CDF_CACHE.get(key)
    if cdf is None:
        cdf = _zipf_cdf(n, s)
        _CDF_CACHE[key] = cdf
    u = rng.random(size)
    return np.searchsorted(cdf, u).astype(np.int64)


def gen_batch(cfg: ModelConfig, seed: int, batch_index: int,
              prev: SparseBatch | None = None, reuse_rate: float = 0.0,
              zipf_s: float = 1.05) -> SparseBatch:
    """Generate batch ``batch_index`` deterministically from (seed, index).

    Per table, round(reuse_rate * lookups) indices are redrawn uniformly
    from the previous batch's rows for that table; the rest follow a
    bounded zipf(s) law, rejection-sampled to avoid the previous batch's
    rows so the measured overlap tracks ``reuse_rate`` rather than
    drifting up with head popularity.
    """
    if not (0.0 <= reuse_rate <= 1.0):
        raise WorkloadError("reuse_rate must be in [0, 1]")
    if batch_index < 0:
        raise WorkloadError("batch_index must be >= 0")
    rng = np.random.default_rng([seed, batch_index])
    k_target = round(reuse_rate * cfg.lookups_per_table) if prev is not None else 0
    indices: list[np.ndarray] = []
    for t in range(cfg.num_tables):
        n = cfg.lookups_per_table
        if prev is not None:
            pool = np.unique(prev.indices[t])
            reused = rng.choice(pool, size=k_target, replace=True) \
                if k_target else np.empty(0, dtype=np.int64)
            prev_set = set(pool.tolist())
            if len(prev_set) >= cfg.rows_per_table:
                prev_set = set()  # nothing to avoid; every row was touched
            fresh = np.empty(n - k_target, dtype=np.int64)
            filled = 0
            while filled < fresh.size:
                cand = _zipf_draw(rng, cfg.rows_per_table, zipf_s,
                                  2 * (fresh.size - filled) + 8)
                for c in cand:
                    if c not in prev_set:
                        fresh[filled] = c
                        filled += 1
                        if filled == fresh.size:
                            break
            idx = np.concatenate([reused.astype(np.int64), fresh])
            rng.shuffle(idx)
        else:
            idx = _zipf_draw(rng, cfg.rows_per_table, zipf_s, n)
        indices.append(idx)
    dense = rng.random(cfg.num_dense, dtype=np.float64)
    label = float(rng.random() < 0.5)
    return SparseBatch(batch_index, indices, dense, label)


def overlap_fraction(a: SparseBatch, b: SparseBatch) -> float:
    """Fraction of b's index draws that land in a's index set, averaged
    over tables."""
    fracs = []
    for ia, ib in zip(a.indices, b.indices):
        sa = set(ia.tolist())
        hits = sum(1 for x in ib.tolist() if x in sa)
        fracs.append(hits / len(ib))
    return float(np.mean(fracs))


def unique_rows(batch: SparseBatch) -> list[np.ndarray]:
    """Sorted deduplicated row ids per table (what a checkpoint copies)."""
    return [np.unique(ix) for ix in batch.indices]


def shared_draws(prev: SparseBatch, cur: SparseBatch) -> int:
    """Number of draws in ``cur`` hitting rows touched by ``prev``
    (these are the reads a just-finished update can interfere with)."""
    total = 0
    for ip, ic in zip(prev.indices, cur.indices):
        sp = set(ip.tolist())
        total += sum(1 for x in ic.tolist() if x in sp)
    return total


# --- trace round-trip -------------------------------------------------------

def save_trace(path, batches: list[SparseBatch]) -> None:
    """Line-delimited JSON, one batch per line."""
    with open(path, "w") as f:
        for b in batches:
            rec = {
                "batch_index": b.batch_index,
                "indices": [ix.tolist() for ix in b.indices],
                "dense": b.dense.tolist(),
                "label": b.label,
            }
            f.write(json.dumps(rec) + "\n")


def load_trace(path) -> list[SparseBatch]:
    out = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            out.append(SparseBatch(
                batch_index=rec["batch_index"],
                indices=[np.asarray(ix, dtype=np.int64)
                         for ix in rec["indices"]],
                dense=np.asarray(rec["dense"], dtype=np.float64),
                label=float(rec["label"]),
            ))
    return out
