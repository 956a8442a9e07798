"""Persistent embedding store with journaled checkpoint generations.

The store owns the persistent partition: the embedding tables (data
region) plus a log area holding checkpoint generations.  A generation
with boundary ``b`` stores row values as of boundary ``b`` (the state
between batch ``b-1`` and batch ``b``); undo logs copy rows before a
batch updates them, redo logs hold the post-update values labeled with
the following boundary.  MLP images are logged in chunks and may lag
the embedding logs by a bounded number of batches (relaxed mode).

Every persistent effect is appended to a journal of small events.
``crash(i)`` replays the first ``i`` events against a pristine copy of
the initial partition and returns the surviving image, which is exactly
what a power failure after the i-th persist would leave behind.
``recover`` maps any image to a consistent batch boundary: it picks
b* = min(newest complete embedding boundary, newest complete MLP
boundary), rolls the data region to boundary b* along the retained
undo chain, and restores the newest complete MLP image at or below b*.
Resuming training at b* from the recovered state is then bit-identical
to a run that never crashed.

Update arithmetic goes through the engine's row-update kernel so
recovery and live training produce identical bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import apply_row_update


class StoreError(ValueError):
    """Invalid configuration or malformed operation arguments."""


class ProtocolViolationError(RuntimeError):
    """An operation was attempted out of protocol order (for example an
    update before its log generation was flagged complete)."""


@dataclass
class JournalEvent:
    """One persisted effect.  ``payload`` carries the written bytes or
    row values so a journal prefix can be replayed exactly."""

    kind: str          # emb_begin|emb_copy|emb_flag|mlp_begin|mlp_chunk|
    #                    mlp_flag|data_write|gen_delete
    gen_id: int = -1
    boundary: int = -1
    table: int = -1
    row: int = -1
    offset: int = -1
    payload: object = None


@dataclass
class GenRecord:
    """One checkpoint generation as it exists in the log area."""

    gen_id: int
    boundary: int
    emb_rows: dict[int, list] = field(default_factory=dict)  # t -> [(row, vals)]
    emb_expected: int = 0
    emb_received: int = 0
    emb_flag: bool = False
    has_emb: bool = False
    mlp: bytearray | None = None
    mlp_expected: int = 0
    mlp_received: int = 0
    mlp_flag: bool = False

    @property
    def emb_complete(self) -> bool:
        return self.emb_flag

    @property
    def mlp_complete(self) -> bool:
        return self.mlp_flag


@dataclass
class CrashImage:
    """What survives on the persistent partition after a crash."""

    tables: list[np.ndarray]
    generations: list[GenRecord]
    log_mode: str


@dataclass
class RecoveryResult:
    tables: list[np.ndarray]
    mlp_image: bytes
    resume_batch: int


class PersistentStore:
    """Near-data store for one training run.

    ``tables`` may be the live engine arrays (the device updates rows
    in place); ``initial_mlp`` seeds the genesis generation so recovery
    is defined from the very first event.
    """

    def __init__(self, tables: list[np.ndarray], initial_mlp: bytes, *,
                 log_mode: str = "undo", chunk_bytes: int = 256,
                 retain_history: bool = False):
        if log_mode not in ("undo", "redo"):
            raise StoreError(f"log_mode must be 'undo' or 'redo', got {log_mode!r}")
        if chunk_bytes < 1:
            raise StoreError("chunk_bytes must be >= 1")
        if not tables:
            raise StoreError("need at least one table")
        if len(initial_mlp) == 0:
            raise StoreError("initial MLP image must be non-empty")
        dims = {t.shape[1] for t in tables}
        if len(dims) != 1:
            raise StoreError("tables must share one row width")
        self.tables = tables
        self.log_mode = log_mode
        self.chunk_bytes = chunk_bytes
        self.retain_history = retain_history
        self.initial_mlp = bytes(initial_mlp)

        self._configured = False
        self.vector_length = 0
        self.learning_rate = 0.0
        self.mlp_address = 0
        self.mlp_size = 0

        self._batches: dict[int, list[np.ndarray]] = {}
        self._gens: dict[int, GenRecord] = {}
        self._next_gen = 1
        self._mlp_sources: dict[int, bytes] = {}  # gen_id -> frozen image

        self.journal: list[JournalEvent] = []
        self.persist_event_count = 0
        self.bytes_logged = 0
        self.bytes_updated = 0
        self.staleness_records: list[tuple[int, int]] = []

        if retain_history:
            self._initial_tables = [t.copy() for t in tables]

        genesis = GenRecord(gen_id=0, boundary=0, emb_flag=True,
                            has_emb=True, mlp=bytearray(self.initial_mlp),
                            mlp_expected=len(self.initial_mlp),
                            mlp_received=len(self.initial_mlp),
                            mlp_flag=True)
        self._gens[0] = genesis

    # --- configuration registers -------------------------------------------

    def configure(self, *, vector_length: int, learning_rate: float,
                  mlp_address: int = 0, mlp_size: int | None = None) -> None:
        """Write the device config registers.  Rejected values leave the
        store unconfigured."""
        width = self.tables[0].shape[1]
        if vector_length != width:
            raise StoreError(
                f"vector_length {vector_length} does not match table row "
                f"width {width}")
        if not (0 < learning_rate < 1):
            raise StoreError("learning_rate out of range")
        if mlp_address < 0:
            raise StoreError("mlp_address must be >= 0")
        size = len(self.initial_mlp) if mlp_size is None else mlp_size
        if size != len(self.initial_mlp):
            raise StoreError(
                f"mlp_size {size} does not match the MLP image "
                f"({len(self.initial_mlp)} bytes)")
        self.vector_length = vector_length
        self.learning_rate = learning_rate
        self.mlp_address = mlp_address
        self.mlp_size = size
        self._configured = True

    def _check_configured(self) -> None:
        if not self._configured:
            raise ProtocolViolationError("store is not configured")

    def register_batch(self, batch_index: int,
                       indices: list[np.ndarray]) -> None:
        """Host writes the batch's per-table lookup indices."""
        self._check_configured()
        if len(indices) != len(self.tables):
            raise StoreError("one index list per table required")
        for t, ix in enumerate(indices):
            if len(ix) and (ix.min() < 0 or ix.max() >= len(self.tables[t])):
                raise StoreError(f"table {t}: index out of range")
        self._batches[batch_index] = [np.asarray(ix, dtype=np.int64)
                                      for ix in indices]

    # --- journal -----------------------------------------------------------

    def _journal(self, ev: JournalEvent, events: int = 1) -> None:
        self.persist_event_count += events
        if self.retain_history:
            self.journal.append(ev)

    # --- embedding logs ----------------------------------------------------

    def _new_gen(self, boundary: int) -> GenRecord:
        g = GenRecord(gen_id=self._next_gen, boundary=boundary)
        self._gens[g.gen_id] = g
        self._next_gen += 1
        return g

    def _unique_rows(self, batch_index: int) -> list[np.ndarray]:
        if batch_index not in self._batches:
            raise ProtocolViolationError(
                f"batch {batch_index} was never registered")
        return [np.unique(ix) for ix in self._batches[batch_index]]

    def log_embeddings(self, batch_index: int) -> GenRecord:
        """Undo log: copy the current values of every row the batch
        will update into a new generation with boundary=batch_index."""
        self._check_configured()
        if self.log_mode != "undo":
            raise ProtocolViolationError("log_embeddings requires undo mode")
        if any(g.has_emb and g.boundary == batch_index and g.gen_id != 0
               for g in self._gens.values()):
            raise ProtocolViolationError(
                f"embedding log for boundary {batch_index} already exists")
        uniq = self._unique_rows(batch_index)
        gen = self._new_gen(batch_index)
        gen.has_emb = True
        gen.emb_expected = int(sum(len(u) for u in uniq))
        self._journal(JournalEvent("emb_begin", gen.gen_id, batch_index))
        row_bytes = 4 * self.tables[0].shape[1]
        for t, rows in enumerate(uniq):
            bucket = gen.emb_rows.setdefault(t, [])
            for r in rows.tolist():
                vals = self.tables[t][r].copy()
                bucket.append((r, vals))
                gen.emb_received += 1
                self.bytes_logged += row_bytes
                self._journal(JournalEvent("emb_copy", gen.gen_id,
                                           batch_index, table=t, row=r,
                                           payload=vals))
        gen.emb_flag = True
        self._journal(JournalEvent("emb_flag", gen.gen_id, batch_index))
        self._record_staleness(batch_index)
        return gen

    def log_update(self, batch_index: int,
                   emb_grads: list[tuple[np.ndarray, np.ndarray]]) -> GenRecord:
        """Redo log: compute the batch's post-update row values and log
        them under boundary=batch_index+1 without touching the data
        region (write-ahead)."""
        self._check_configured()
        if self.log_mode != "redo":
            raise ProtocolViolationError("log_update requires redo mode")
        uniq = self._unique_rows(batch_index)
        boundary = batch_index + 1
        gen = self._new_gen(boundary)
        gen.has_emb = True
        gen.emb_expected = int(sum(len(u) for u in uniq))
        self._journal(JournalEvent("emb_begin", gen.gen_id, boundary))
        row_bytes = 4 * self.tables[0].shape[1]
        for t, (rows, g) in enumerate(emb_grads):
            if not np.array_equal(rows, uniq[t]):
                raise ProtocolViolationError(
                    f"table {t}: gradient rows do not match the registered "
                    f"batch")
            new_vals = apply_row_update(self.tables[t][rows], g,
                                        self.learning_rate)
            bucket = gen.emb_rows.setdefault(t, [])
            for k, r in enumerate(rows.tolist()):
                bucket.append((r, new_vals[k].copy()))
                gen.emb_received += 1
                self.bytes_logged += row_bytes
                self._journal(JournalEvent("emb_copy", gen.gen_id, boundary,
                                           table=t, row=r,
                                           payload=new_vals[k].copy()))
        gen.emb_flag = True
        self._journal(JournalEvent("emb_flag", gen.gen_id, boundary))
        self._record_staleness(batch_index)
        return gen

    # --- MLP logs ----------------------------------------------------------

    def begin_mlp_log(self, boundary: int, image: bytes,
                      attach: bool = True) -> GenRecord:
        """Start logging an MLP image captured at ``boundary``.

        With ``attach`` (per-batch checkpoint modes) the image joins the
        generation already holding that boundary's row log; without it
        (relaxed mode, where images straddle batches) a standalone
        generation is opened.
        """
        self._check_configured()
        if len(image) != self.mlp_size:
            raise StoreError(
                f"MLP image is {len(image)} bytes, register says "
                f"{self.mlp_size}")
        gen = None
        if attach:
            for g in sorted(self._gens.values(), key=lambda g: -g.gen_id):
                if g.boundary == boundary and g.mlp is None and g.gen_id != 0:
                    gen = g
                    break
        if gen is None:
            gen = self._new_gen(boundary)
        gen.mlp = bytearray(self.mlp_size)
        gen.mlp_expected = self.mlp_size
        self._mlp_sources[gen.gen_id] = bytes(image)
        self._journal(JournalEvent("mlp_begin", gen.gen_id, boundary,
                                   payload=self.mlp_size))
        return gen

    def log_mlp_chunk(self, gen: GenRecord, nbytes: int | None = None) -> int:
        """Stream the next chunk of the frozen image into the log.
        Returns bytes written; completing the image sets the flag."""
        self._check_configured()
        if gen.mlp is None:
            raise ProtocolViolationError("no MLP log open on this generation")
        if gen.mlp_flag:
            raise ProtocolViolationError("MLP log already complete")
        remaining = gen.mlp_expected - gen.mlp_received
        n = self.chunk_bytes if nbytes is None else nbytes
        if n == 0:
            return 0
        if n < 0 or n > remaining:
            raise ProtocolViolationError(
                f"chunk of {n} bytes overflows the {remaining} bytes left")
        src = self._mlp_sources[gen.gen_id]
        off = gen.mlp_received
        gen.mlp[off:off + n] = src[off:off + n]
        gen.mlp_received += n
        self.bytes_logged += n
        events = -(-n // self.chunk_bytes)
        self._journal(JournalEvent("mlp_chunk", gen.gen_id, gen.boundary,
                                   offset=off, payload=src[off:off + n]),
                      events=events)
        if gen.mlp_received == gen.mlp_expected:
            gen.mlp_flag = True
            self._journal(JournalEvent("mlp_flag", gen.gen_id, gen.boundary))
        return n

    def log_mlp_all(self, boundary: int, image: bytes) -> GenRecord:
        """Log a whole MLP image at once (per-batch checkpoint modes).
        Streams chunk by chunk when history is kept so every chunk is a
        crash point; one aggregated write otherwise."""
        gen = self.begin_mlp_log(boundary, image)
        if self.retain_history:
            while not gen.mlp_flag:
                self.log_mlp_chunk(gen, min(self.chunk_bytes,
                                            gen.mlp_expected
                                            - gen.mlp_received))
        else:
            self.log_mlp_chunk(gen, gen.mlp_expected)
        return gen

    # --- data-region updates -----------------------------------------------

    def _guard_update(self, batch_index: int) -> None:
        need = batch_index if self.log_mode == "undo" else batch_index + 1
        ok = any(g.has_emb and g.boundary == need and g.emb_flag
                 and g.gen_id != 0
                 for g in self._gens.values())
        if not ok:
            raise ProtocolViolationError(
                f"update of batch {batch_index} before its log generation "
                f"(boundary {need}) is complete")

    def update_rows(self, batch_index: int,
                    emb_grads: list[tuple[np.ndarray, np.ndarray]]) -> None:
        """Apply the batch's sparse SGD step to the data region.  Only
        legal once the protecting log generation is flagged complete."""
        self._check_configured()
        self._guard_update(batch_index)
        uniq = self._unique_rows(batch_index)
        row_bytes = 4 * self.tables[0].shape[1]
        for t, (rows, g) in enumerate(emb_grads):
            if not np.array_equal(rows, uniq[t]):
                raise ProtocolViolationError(
                    f"table {t}: gradient rows do not match the registered "
                    f"batch")
            if not len(rows):
                continue
            new_vals = apply_row_update(self.tables[t][rows], g,
                                        self.learning_rate)
            self.tables[t][rows] = new_vals
            for k, r in enumerate(rows.tolist()):
                self.bytes_updated += row_bytes
                self._journal(JournalEvent("data_write", -1, -1, table=t,
                                           row=r, payload=new_vals[k].copy()))

    # --- retention ---------------------------------------------------------

    def _delete_gen(self, gen_id: int) -> None:
        g = self._gens.pop(gen_id)
        self._mlp_sources.pop(gen_id, None)
        self._journal(JournalEvent("gen_delete", gen_id, g.boundary))

    def commit(self, batch_index: int) -> None:
        """Per-batch checkpoint modes: verify the batch's generation is
        fully persistent, then reclaim all older generations."""
        self._check_configured()
        need = batch_index if self.log_mode == "undo" else batch_index + 1
        gen = next((g for g in self._gens.values()
                    if g.boundary == need and g.gen_id != 0 and g.has_emb),
                   None)
        if gen is None or not gen.emb_flag or not gen.mlp_flag:
            raise ProtocolViolationError(
                f"commit of batch {batch_index} before generation "
                f"{need} is complete")
        for gid in sorted(g.gen_id for g in self._gens.values()
                          if g.gen_id != 0 and g.boundary < need):
            self._delete_gen(gid)

    def prune(self) -> None:
        """Relaxed mode: drop embedding generations older than the
        newest complete MLP boundary and all but the newest two complete
        MLP generations (genesis always stays)."""
        self._check_configured()
        m_star = self._newest_complete_mlp_boundary()
        mlp_complete = sorted((g for g in self._gens.values()
                               if g.gen_id != 0 and g.mlp_flag),
                              key=lambda g: (g.boundary, g.gen_id))
        keep_mlp = {g.gen_id for g in mlp_complete[-2:]}
        for gid in sorted(g.gen_id for g in self._gens.values()):
            g = self._gens[gid]
            if g.gen_id == 0:
                continue
            emb_needed = g.has_emb and g.boundary >= m_star
            mlp_needed = g.mlp is not None and (not g.mlp_flag
                                                or g.gen_id in keep_mlp)
            if not emb_needed and not mlp_needed:
                self._delete_gen(gid)

    def _newest_complete_mlp_boundary(self) -> int:
        return max(g.boundary for g in self._gens.values() if g.mlp_flag)

    @property
    def newest_complete_mlp_boundary(self) -> int:
        return self._newest_complete_mlp_boundary()

    @property
    def generations(self) -> list[GenRecord]:
        return sorted(self._gens.values(), key=lambda g: g.gen_id)

    def _record_staleness(self, batch_index: int) -> None:
        gap = batch_index - self._newest_complete_mlp_boundary()
        self.staleness_records.append((batch_index, max(gap, 0)))

    @property
    def max_staleness(self) -> int:
        return max((g for _, g in self.staleness_records), default=0)

    # --- crash & recovery --------------------------------------------------

    def image(self) -> CrashImage:
        """Current persistent partition (what a clean shutdown leaves)."""
        gens = []
        for g in sorted(self._gens.values(), key=lambda g: g.gen_id):
            gens.append(GenRecord(
                gen_id=g.gen_id, boundary=g.boundary,
                emb_rows={t: [(r, v.copy()) for r, v in rows]
                          for t, rows in g.emb_rows.items()},
                emb_expected=g.emb_expected, emb_received=g.emb_received,
                emb_flag=g.emb_flag, has_emb=g.has_emb,
                mlp=None if g.mlp is None else bytearray(g.mlp),
                mlp_expected=g.mlp_expected, mlp_received=g.mlp_received,
                mlp_flag=g.mlp_flag))
        return CrashImage(tables=[t.copy() for t in self.tables],
                          generations=gens, log_mode=self.log_mode)

    def crash(self, event_index: int) -> CrashImage:
        """Replay the first ``event_index`` journaled events against the
        pristine initial partition: the state a power cut after that
        event would leave.  Requires retain_history."""
        if not self.retain_history:
            raise StoreError("crash replay requires retain_history=True")
        if not (0 <= event_index <= len(self.journal)):
            raise StoreError(
                f"event index {event_index} outside journal of "
                f"{len(self.journal)} events")
        tables = [t.copy() for t in self._initial_tables]
        gens: dict[int, GenRecord] = {0: GenRecord(
            gen_id=0, boundary=0, emb_flag=True, has_emb=True,
            mlp=bytearray(self.initial_mlp),
            mlp_expected=len(self.initial_mlp),
            mlp_received=len(self.initial_mlp), mlp_flag=True)}
        for ev in self.journal[:event_index]:
            if ev.kind == "emb_begin":
                gens[ev.gen_id] = GenRecord(gen_id=ev.gen_id,
                                            boundary=ev.boundary,
                                            has_emb=True)
            elif ev.kind == "emb_copy":
                g = gens[ev.gen_id]
                g.emb_rows.setdefault(ev.table, []).append(
                    (ev.row, ev.payload.copy()))
                g.emb_received += 1
            elif ev.kind == "emb_flag":
                gens[ev.gen_id].emb_flag = True
            elif ev.kind == "mlp_begin":
                g = gens.get(ev.gen_id)
                if g is None:
                    g = GenRecord(gen_id=ev.gen_id, boundary=ev.boundary)
                    gens[ev.gen_id] = g
                g.mlp = bytearray(ev.payload)
                g.mlp_expected = ev.payload
            elif ev.kind == "mlp_chunk":
                g = gens[ev.gen_id]
                g.mlp[ev.offset:ev.offset + len(ev.payload)] = ev.payload
                g.mlp_received += len(ev.payload)
            elif ev.kind == "mlp_flag":
                gens[ev.gen_id].mlp_flag = True
            elif ev.kind == "data_write":
                tables[ev.table][ev.row] = ev.payload
            elif ev.kind == "gen_delete":
                gens.pop(ev.gen_id, None)
            else:  # pragma: no cover
                raise StoreError(f"unknown journal kind {ev.kind!r}")
        return CrashImage(tables=tables,
                          generations=sorted(gens.values(),
                                             key=lambda g: g.gen_id),
                          log_mode=self.log_mode)


def recover(image: CrashImage) -> RecoveryResult:
    """Map a crash image to a consistent resume point.

    b* = min(newest complete embedding boundary, newest complete MLP
    boundary).  Undo images roll the data region back to b* by applying
    retained generations newest-first; redo images roll forward by
    applying complete generations oldest-first.  The restored MLP is
    the newest complete image with boundary <= b*.
    """
    gens = image.generations
    emb_done = [g for g in gens if g.has_emb and g.emb_flag]
    mlp_done = [g for g in gens if g.mlp is not None and g.mlp_flag]
    e_star = max(g.boundary for g in emb_done)
    m_star = max(g.boundary for g in mlp_done)
    b_star = min(e_star, m_star)

    tables = [t.copy() for t in image.tables]
    if image.log_mode == "undo":
        chain = sorted((g for g in emb_done if g.boundary >= b_star),
                       key=lambda g: (g.boundary, g.gen_id), reverse=True)
        covered = {g.boundary for g in chain}
        for b in range(b_star, e_star + 1):
            if b not in covered:
                raise ProtocolViolationError(
                    f"undo chain is missing boundary {b}")
        for g in chain:
            for t, rows in g.emb_rows.items():
                for r, vals in rows:
                    tables[t][r] = vals
    else:
        if e_star != m_star:
            raise ProtocolViolationError(
                "redo image has a torn generation (embedding and MLP "
                "flags disagree); the data region cannot be rolled back")
        chain = sorted((g for g in emb_done if g.boundary <= b_star),
                       key=lambda g: (g.boundary, g.gen_id))
        for g in chain:
            for t, rows in g.emb_rows.items():
                for r, vals in rows:
                    tables[t][r] = vals

    mlp_gen = max((g for g in mlp_done if g.boundary <= b_star),
                  key=lambda g: (g.boundary, g.gen_id))
    return RecoveryResult(tables=tables, mlp_image=bytes(mlp_gen.mlp),
                          resume_batch=b_star)


def export_events(store: PersistentStore, path) -> None:
    """Line-delimited journal trace (observability; no payloads)."""
    import json
    with open(path, "w") as f:
        for ev in store.journal:
            size = 0
            if ev.payload is not None:
                size = (len(ev.payload) if isinstance(ev.payload,
                                                      (bytes, bytearray))
                        else getattr(ev.payload, "nbytes", 0))
            f.write(json.dumps({
                "kind": ev.kind, "gen": ev.gen_id, "boundary": ev.boundary,
                "table": ev.table, "row": ev.row, "offset": ev.offset,
                "nbytes": int(size),
            }) + "\n")
