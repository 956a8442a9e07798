"""Discrete-event timeline simulator for embedding-table training runs.

Builds per-batch timelines for six storage policies that differ in where
the model's persistent copy lives (local SSD, host persistent memory, a
PCIe-attached device, or a cache-coherent device) and in how checkpoints
are taken (write-ahead redo, per-batch undo, or relaxed undo with a
bounded-staleness MLP log).  The same schedule can optionally drive the
functional engine and journaled store so that timing, training math, and
crash recovery all come from one run.

Scheduling model, in brief:

* One serialized media queue per run.  Every phase that touches the
  memory device (lookups, row updates, log copies, image writes) claims
  the queue in issue order.  Attribution events land on ``MEM_compute``
  or ``MEM_checkpoint``; a mirror event on ``MEM_media`` carries the
  charged byte counts.
* The GPU runs batch-synchronously: dense forward overlaps the lookup,
  the interaction window starts once both finish, and nothing from the
  next batch is issued before both the GPU and the media queue drain.
* Bulk log streams are priced media-bound at the policy's channel
  parallelism; interconnect links add only their per-transfer latency
  to them.  Data-path transfers (vectors out, gradients back) pay full
  link time.
* Reads that land within the media's hazard window after an update to
  shared rows stall the pipeline; only the batch-aware undo schedule
  issues its next lookup that soon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .devices import (DeviceProfile, LinkProfile, burst_bytes,
                      burst_raw_stall, burst_time, dram_profile,
                      pmem_profile, ssd_profile, transfer_time)
from .engine import (TrainState, apply_row_update, config_hash,
                     deserialize_mlp, init_state, serialize_mlp,
                     train_batch)
from .store import PersistentStore, RecoveryResult
from .workload import ModelConfig, SparseBatch, gen_batch, shared_draws, unique_rows


class SimError(RuntimeError):
    pass


class SimInvariantError(SimError):
    """A cross-checked model invariant failed during a functional run."""

    def __init__(self, invariant: str, detail: str):
        super().__init__(f"invariant {invariant!r} violated: {detail}")
        self.invariant = invariant


class Policy(str, Enum):
    SSD = "SSD"        # local flash, software redo checkpoints
    PMEM = "PMEM"      # host persistent DIMMs, software redo
    PCIE = "PCIE"      # PCIe-attached PM device, software redo
    CXL_D = "CXL_D"    # coherent device, hardware-flushed redo
    CXL_B = "CXL_B"    # coherent device, per-batch undo logging
    CXL = "CXL"        # coherent device, relaxed undo + early reduce


SOFTWARE_POLICIES = frozenset({Policy.SSD, Policy.PMEM, Policy.PCIE})
HOST_MEDIA_POLICIES = frozenset({Policy.SSD, Policy.PMEM})
REDO_POLICIES = frozenset({Policy.SSD, Policy.PMEM, Policy.PCIE, Policy.CXL_D})
DEVICE_POLICIES = frozenset({Policy.CXL_D, Policy.CXL_B, Policy.CXL})

RES_GPU = "GPU"
RES_MEDIA = "MEM_media"
RES_COMPUTE = "MEM_compute"
RES_CHECKPOINT = "MEM_checkpoint"
RES_HOST = "Host"
RES_LINK = "Link"

CAT_BMLP = "B_MLP"
CAT_TMLP = "T_MLP"
CAT_EMB = "Embedding"
CAT_TRANSFER = "Transfer"
CAT_CKPT = "Checkpoint"
CAT_IDLE = "Idle"

# critical-path attribution: at any instant the highest-priority active
# category owns the time slice
CATEGORY_PRIORITY = (CAT_TMLP, CAT_BMLP, CAT_EMB, CAT_TRANSFER, CAT_CKPT)
CATEGORIES = CATEGORY_PRIORITY + (CAT_IDLE,)

# below this many parameters + table cells the run also executes the
# functional engine/store alongside the timing model
FUNCTIONAL_CELL_LIMIT = 500_000


@dataclass(frozen=True)
class CostParams:
    """Calibration constants shared by every policy schedule."""

    seconds_per_mac: float = 5.5e-14
    kernel_launch: float = 3e-6
    sync_latency: float = 20e-6        # software stream-sync stall
    copy_latency: float = 20e-6        # software staging copy
    device_channels: int = 152         # aggregate device-side parallelism
    host_pmem_channels: int = 4
    ssd_channels: int = 1
    raw_stall_concurrency: float = 20.0
    device_row_update_compute: float = 0.0   # near-data per-row update cost
    correction_base: float = 1e-6
    correction_per_row: float = 1e-8


@dataclass
class ProfileSet:
    dram: DeviceProfile
    pmem: DeviceProfile
    ssd: DeviceProfile
    cxl_link: LinkProfile
    pcie_link: LinkProfile
    cost: CostParams = field(default_factory=CostParams)


def default_profiles() -> ProfileSet:
    return ProfileSet(dram=dram_profile(), pmem=pmem_profile(),
                      ssd=ssd_profile(),
                      cxl_link=LinkProfile("cxl", 500e-9, 64e9),
                      pcie_link=LinkProfile("pcie", 1e-6, 32e9),
                      cost=CostParams())


@dataclass
class SimOptions:
    reuse_rate: float = 0.8
    zipf_exponent: float = 1.05
    functional: bool | None = None     # None: auto by model size
    retain_history: bool = False       # keep the journal for crash replay
    checkpoint_enabled: bool = True
    staleness_bound: int = 100
    raw_modeling: bool = True
    mlp_chunk_bytes: int | None = None  # None: 256 functional, 256 KiB timing
    media_override: DeviceProfile | None = None
    verify_relaxed: bool = True


@dataclass
class Event:
    resource: str
    category: str
    start: float
    end: float
    nbytes: int = 0
    batch: int = -1


@dataclass
class Timeline:
    events: list[Event]
    total_time: float
    batch_bounds: list[tuple[float, float]]
    stats: dict


@dataclass
class SimResult:
    policy: Policy
    cfg: ModelConfig
    timeline: Timeline
    summary: dict
    state: TrainState | None = None
    store: PersistentStore | None = None


# --- GPU cost model ---------------------------------------------------------

def mac_counts(cfg: ModelConfig) -> tuple[int, int]:
    """Per-sample MAC counts for the dense stack and the interaction+top
    stack (the latter's first width already includes the concatenated
    embedding vectors)."""
    bot = cfg.bottom_mlp_layers
    top = cfg.top_mlp_layers
    f_b = sum(a * b for a, b in zip(bot, bot[1:]))
    f_t = sum(a * b for a, b in zip(top, top[1:]))
    return f_b, f_t


def gpu_phase_times(cfg: ModelConfig, cost: CostParams) -> tuple[float, float]:
    """(dense-forward time, window time).  The window covers interaction,
    top forward, and the whole backward pass; its gradients leave the GPU
    at window end."""
    f_b, f_t = mac_counts(cfg)
    bs = cfg.batch_size
    p = cost.seconds_per_mac
    n_bot = len(cfg.bottom_mlp_layers) - 1
    n_top = len(cfg.top_mlp_layers) - 1
    b_dur = n_bot * cost.kernel_launch + bs * f_b * p
    w_dur = (n_top + 3) * cost.kernel_launch + bs * (3 * f_t + 2 * f_b) * p
    return b_dur, w_dur


# --- scheduler --------------------------------------------------------------

class _Run:
    """Mutable state for one policy run; produces the Timeline."""

    def __init__(self, policy: Policy, cfg: ModelConfig,
                 profiles: ProfileSet, opts: SimOptions,
                 n_batches: int, seed: int):
        self.policy = policy
        self.cfg = cfg
        self.profiles = profiles
        self.opts = opts
        self.n_batches = n_batches
        self.seed = seed
        self.cost = profiles.cost

        if opts.media_override is not None:
            self.media = opts.media_override
        elif policy is Policy.SSD:
            self.media = profiles.ssd
        else:
            self.media = profiles.pmem
        if policy is Policy.SSD:
            self.channels = self.cost.ssd_channels
        elif policy is Policy.PMEM:
            self.channels = self.cost.host_pmem_channels
        else:
            self.channels = self.cost.device_channels
        self.link = (profiles.cxl_link if policy in DEVICE_POLICIES
                     else profiles.pcie_link)

        cells = cfg.mlp_param_count + cfg.num_tables * cfg.rows_per_table * cfg.feature_dim
        self.functional = (opts.functional if opts.functional is not None
                           else cells <= FUNCTIONAL_CELL_LIMIT)
        self.chunk = (opts.mlp_chunk_bytes if opts.mlp_chunk_bytes is not None
                      else (256 if self.functional else 262144))
        self.checkpointing = opts.checkpoint_enabled

        # same batch stream for every policy at a given (cfg, seed, opts)
        self.batches: list[SparseBatch] = []
        prev = None
        for i in range(n_batches):
            b = gen_batch(cfg, seed, i, prev=prev, reuse_rate=opts.reuse_rate,
                          zipf_s=opts.zipf_exponent)
            self.batches.append(b)
            prev = b
        self.uniques = [unique_rows(b) for b in self.batches]
        self.u_counts = [sum(len(u) for u in uu) for uu in self.uniques]

        self.row_b = cfg.row_bytes
        self.draws = cfg.num_tables * cfg.lookups_per_table
        self.b_dur, self.w_dur = gpu_phase_times(cfg, self.cost)
        self.vec_bytes = (self.draws * self.row_b
                          if policy in SOFTWARE_POLICIES
                          else cfg.num_tables * cfg.feature_dim * 4)
        self.grad_bytes = cfg.num_tables * cfg.feature_dim * 4
        self.pair_dur = self.cost.sync_latency + self.cost.copy_latency

        self.mlp_bytes = cfg.mlp_bytes
        self.mlp_chunks = -(-self.mlp_bytes // self.chunk)
        self.chunk_bw = (self.media.chargeable_bytes(self.chunk)
                         / (self.media.write_bandwidth * self.channels))
        self.chunk_charge = self.media.chargeable_bytes(self.chunk)

        self.events: list[Event] = []
        self.media_free = 0.0
        self.gpu_free = 0.0
        self.last_update_end: float | None = None
        self.last_update_batch: int | None = None

        self.raw_hits = 0
        self.raw_stall_time = 0.0
        self.staleness: list[int] = []
        self.newest_mlp = 0            # genesis image is boundary 0
        self.open_boundary: int | None = None
        self.open_chunks_left = 0
        self.read_bytes = 0
        self.write_bytes = 0

        self.state: TrainState | None = None
        self.store: PersistentStore | None = None
        self.open_gen = None
        if self.functional:
            self.state = init_state(cfg, seed)
            if self.checkpointing:
                mode = "redo" if policy in REDO_POLICIES else "undo"
                self.store = PersistentStore(
                    self.state.tables, serialize_mlp(self.state),
                    log_mode=mode, chunk_bytes=self.chunk,
                    retain_history=opts.retain_history)
                self.store.configure(vector_length=cfg.feature_dim,
                                     learning_rate=cfg.learning_rate)
        self.final_loss: float | None = None

    # -- event emission ------------------------------------------------------

    def _ev(self, resource: str, category: str, start: float, dur: float,
            batch: int, nbytes: int = 0) -> float:
        end = start + dur
        self.events.append(Event(resource, category, start, end, nbytes, batch))
        return end

    def _media_phase(self, resource: str, category: str, earliest: float,
                     dur: float, batch: int, rbytes: int = 0,
                     wbytes: int = 0) -> tuple[float, float]:
        start = max(earliest, self.media_free)
        end = start + dur
        self.events.append(Event(resource, category, start, end, 0, batch))
        self.events.append(Event(RES_MEDIA, category, start, end,
                                 rbytes + wbytes, batch))
        self.media_free = end
        self.read_bytes += rbytes
        self.write_bytes += wbytes
        return start, end

    # -- phase pricing -------------------------------------------------------

    def _read_burst(self, count: int) -> tuple[float, int]:
        t = burst_time(self.media, "read", count, self.row_b, self.channels)
        return t, burst_bytes(self.media, count, self.row_b)

    def _copy_burst(self, count: int) -> tuple[float, int, int]:
        """Row copy inside the medium: read then write each row."""
        rt = burst_time(self.media, "read", count, self.row_b, self.channels)
        wt = burst_time(self.media, "write", count, self.row_b, self.channels)
        nb = burst_bytes(self.media, count, self.row_b)
        return rt + wt, nb, nb

    def _raw_lookup_hits(self, start: float, reading_batch: int) -> int:
        if not self.opts.raw_modeling:
            return 0
        if self.media.raw_penalty_factor <= 1.0:
            return 0
        if self.last_update_end is None:
            return 0
        if start - self.last_update_end > self.media.raw_window:
            return 0
        return shared_draws(self.batches[self.last_update_batch],
                            self.batches[reading_batch])

    def _lookup_phase(self, earliest: float, reading_batch: int,
                      tagged_batch: int) -> tuple[float, float]:
        """Media read of every drawn row, with hazard stalls when it
        lands right on the heels of an update to shared rows."""
        start = max(earliest, self.media_free)
        dur, nb = self._read_burst(self.draws)
        hits = self._raw_lookup_hits(start, reading_batch)
        if hits:
            stall = burst_raw_stall(self.media, hits,
                                    self.cost.raw_stall_concurrency)
            dur += stall
            self.raw_hits += hits
            self.raw_stall_time += stall
        return self._media_phase(RES_COMPUTE, CAT_EMB, earliest, dur,
                                 tagged_batch, rbytes=nb)

    def _update_phase(self, earliest: float, n: int) -> tuple[float, float]:
        u = self.u_counts[n]
        dur, rb, wb = self._copy_burst(u)
        if self.policy in DEVICE_POLICIES:
            dur += u * self.cost.device_row_update_compute
        s, e = self._media_phase(RES_COMPUTE, CAT_EMB, earliest, dur, n,
                                 rbytes=rb, wbytes=wb)
        self.last_update_end = e
        self.last_update_batch = n
        return s, e

    def _emb_log_phase(self, n: int) -> tuple[float, float]:
        u = self.u_counts[n]
        dur, rb, wb = self._copy_burst(u)
        if self.policy is Policy.PCIE:
            # rows shuttle through the host on a device with no
            # near-data copy engine
            dur += 2 * self.link.per_transfer_latency
        return self._media_phase(RES_CHECKPOINT, CAT_CKPT, 0.0, dur, n,
                                 rbytes=rb, wbytes=wb)

    def _mlp_log_phase(self, n: int) -> tuple[float, float]:
        dur = burst_time(self.media, "write", self.mlp_chunks, self.chunk,
                         self.channels) + self.link.per_transfer_latency
        wb = burst_bytes(self.media, self.mlp_chunks, self.chunk)
        return self._media_phase(RES_CHECKPOINT, CAT_CKPT, 0.0, dur, n,
                                 wbytes=wb)

    def _pair(self, start: float, category: str, n: int) -> float:
        """Software sync + staging copy; stalls the pipeline."""
        return self._ev(RES_HOST, category, start, self.pair_dur, n)

    # -- relaxed MLP log bookkeeping ----------------------------------------

    def _begin_open_log(self, boundary: int) -> None:
        self.open_boundary = boundary
        self.open_chunks_left = self.mlp_chunks
        if self.store is not None:
            image = serialize_mlp(self.state)
            self.open_gen = self.store.begin_mlp_log(boundary, image,
                                                     attach=False)

    def _stream_chunks(self, m: int) -> None:
        """Mark m chunks of the open log written (store side)."""
        if self.store is not None and self.open_gen is not None:
            left = self.open_gen.mlp_expected - self.open_gen.mlp_received
            n = min(m * self.chunk, left)
            if n:
                self.store.log_mlp_chunk(self.open_gen, n)

    def _close_open_log(self) -> None:
        self.newest_mlp = self.open_boundary
        self.open_boundary = None
        self.open_chunks_left = 0
        if self.store is not None:
            self.store.prune()
            self.open_gen = None

    def _flush_open_log(self, n: int) -> None:
        m = self.open_chunks_left
        dur = (self.media.write_latency
               + m * self.chunk_bw + self.link.per_transfer_latency)
        self._media_phase(RES_CHECKPOINT, CAT_CKPT, 0.0, dur, n,
                          wbytes=m * self.chunk_charge)
        self._stream_chunks(m)
        self._close_open_log()

    def _enforce_staleness_bound(self, n: int, begun: bool) -> bool:
        """Force a blocking flush when the next recorded gap would pass
        the bound; returns whether a log was begun in the process."""
        bound = self.opts.staleness_bound
        if n - self.newest_mlp <= bound:
            return begun
        if self.open_boundary is not None:
            self._flush_open_log(n)
        if n - self.newest_mlp > bound:
            # the drained log was itself too old: take a fresh full image
            self._begin_open_log(n)
            begun = True
            self._flush_open_log(n)
        return begun

    def _fill_window_chunks(self, n: int, w_start: float, w_end: float,
                            begun: bool) -> None:
        """Stream log chunks whenever the media is free inside the GPU
        window.  A chunk may start any time before the window closes; a
        straddling chunk runs to completion."""
        t = max(self.media_free, w_start)
        lat = self.media.write_latency
        while t < w_end:
            if self.open_boundary is None:
                if begun:
                    break
                self._begin_open_log(n)
                begun = True
            span = w_end - t - lat
            fit = 1 if span <= 0 else int(math.floor(span / self.chunk_bw)) + 1
            m = min(self.open_chunks_left, max(1, fit))
            dur = lat + m * self.chunk_bw
            self._media_phase(RES_CHECKPOINT, CAT_CKPT, t, dur, n,
                              wbytes=m * self.chunk_charge)
            self._stream_chunks(m)
            self.open_chunks_left -= m
            if self.open_chunks_left == 0:
                self._close_open_log()
            t = self.media_free

    def _record_staleness(self, n: int) -> None:
        self.staleness.append(n - self.newest_mlp)

    # -- functional engine steps --------------------------------------------

    def _train(self, n: int) -> None:
        if self.state is None:
            return
        batch = self.batches[n]
        if self.store is None:
            info = train_batch(self.state, batch)
            self.final_loss = info.loss
            return
        info = train_batch(self.state, batch, apply_emb=False)
        if (self.policy is Policy.CXL and self.opts.verify_relaxed
                and n + 1 < self.n_batches):
            worst = _relaxed_residual(self.state, self.batches[n + 1],
                                      info.emb_grads, self.cfg.learning_rate)
            if worst > 1e-6:
                raise SimInvariantError(
                    "relaxed-lookup-equivalence",
                    f"batch {n}: corrected reduce off by {worst:.3e}")
        if self.store.log_mode == "redo":
            # write-ahead: post-update row values hit the log first
            self.store.log_update(n, info.emb_grads)
        self.store.update_rows(n, info.emb_grads)
        self.final_loss = info.loss

    # -- per-policy batch schedules -----------------------------------------

    def _schedule_standard(self, n: int) -> None:
        """SSD / PMEM / PCIE / CXL_D / CXL_B batch."""
        p = self.policy
        software = p in SOFTWARE_POLICIES
        origin = max(self.gpu_free, self.media_free)
        batch = self.batches[n]

        if self.store is not None:
            self.store.register_batch(n, batch.indices)
            if p is Policy.CXL_B:
                self.store.log_embeddings(n)
                self.store.log_mlp_all(n, serialize_mlp(self.state))

        _, le = self._lookup_phase(origin, n, n)
        t_end = self._ev(RES_LINK, CAT_TRANSFER, le,
                         transfer_time(self.link, self.vec_bytes), n,
                         self.vec_bytes)
        b_end = self._ev(RES_GPU, CAT_BMLP, origin, self.b_dur, n)

        ckpt_done = None
        if p is Policy.CXL_B and self.checkpointing:
            self._emb_log_phase(n)
            _, ckpt_done = self._mlp_log_phase(n)

        ready = max(b_end, t_end)
        if software:
            ready = self._pair(ready, CAT_TRANSFER, n)
        w_end = self._ev(RES_GPU, CAT_TMLP, ready, self.w_dur, n)
        self.gpu_free = w_end

        g_start = self._pair(w_end, CAT_TRANSFER, n) if software else w_end
        tg_end = self._ev(RES_LINK, CAT_TRANSFER, g_start,
                          transfer_time(self.link, self.grad_bytes), n,
                          self.grad_bytes)

        earliest = tg_end
        if ckpt_done is not None:
            earliest = max(earliest, ckpt_done)
        self._train(n)
        _, ue = self._update_phase(earliest, n)

        if p in REDO_POLICIES and self.checkpointing:
            if self.store is not None:
                self.store.log_mlp_all(n + 1, serialize_mlp(self.state))
            cs = self._pair(ue, CAT_CKPT, n) if software else ue
            self.media_free = max(self.media_free, cs)
            self._emb_log_phase(n)
            self._mlp_log_phase(n)
        if self.store is not None:
            self.store.commit(n)

    def _schedule_relaxed(self, n: int) -> None:
        """CXL batch: early reduce for the next batch, corrected sums for
        this one, log streams packed into the GPU window."""
        origin = max(self.gpu_free, self.media_free)
        batch = self.batches[n]

        if self.store is not None:
            self.store.register_batch(n, batch.indices)

        begun = False
        if self.checkpointing:
            begun = self._enforce_staleness_bound(n, begun)

        if n == 0:
            # cold start: no stale sums to correct, read everything now
            _, ce = self._lookup_phase(origin, n, n)
        else:
            s = self.batches[n - 1]
            corr = (self.cost.correction_base + self.cost.correction_per_row
                    * shared_draws(s, batch))
            _, ce = self._media_phase(RES_COMPUTE, CAT_EMB, origin, corr, n)

        if self.checkpointing:
            self._record_staleness(n)
            self._emb_log_phase(n)
            if self.store is not None:
                self.store.log_embeddings(n)

        if n + 1 < self.n_batches:
            # pre-update reduce for the next batch; by construction it
            # runs well clear of this batch's update
            dur, nb = self._read_burst(self.draws)
            hits = self._raw_lookup_hits(self.media_free, n + 1)
            if hits:
                stall = burst_raw_stall(self.media, hits,
                                        self.cost.raw_stall_concurrency)
                dur += stall
                self.raw_hits += hits
                self.raw_stall_time += stall
            self._media_phase(RES_COMPUTE, CAT_EMB, 0.0, dur, n, rbytes=nb)

        t_end = self._ev(RES_LINK, CAT_TRANSFER, ce,
                         transfer_time(self.link, self.vec_bytes), n,
                         self.vec_bytes)
        b_end = self._ev(RES_GPU, CAT_BMLP, origin, self.b_dur, n)
        ready = max(b_end, t_end)
        w_end = self._ev(RES_GPU, CAT_TMLP, ready, self.w_dur, n)
        self.gpu_free = w_end

        if self.checkpointing:
            self._fill_window_chunks(n, ready, w_end, begun)

        tg_end = self._ev(RES_LINK, CAT_TRANSFER, w_end,
                          transfer_time(self.link, self.grad_bytes), n,
                          self.grad_bytes)
        self._train(n)
        self._update_phase(tg_end, n)

    def run(self) -> SimResult:
        for n in range(self.n_batches):
            if self.policy is Policy.CXL:
                self._schedule_relaxed(n)
            else:
                self._schedule_standard(n)
        if (self.policy is Policy.CXL and self.checkpointing
                and self.open_boundary is not None):
            # drain the in-flight log so shutdown leaves a complete image
            self._flush_open_log(self.n_batches - 1)

        total = max((e.end for e in self.events), default=0.0)
        bounds = []
        for n in range(self.n_batches):
            evs = [e for e in self.events if e.batch == n]
            bounds.append((min(e.start for e in evs),
                           max(e.end for e in evs)))
        stats = {
            "media": self.media.name,
            "link": self.link.name,
            "channels": self.channels,
            "media_read_bytes": self.read_bytes,
            "media_write_bytes": self.write_bytes,
            "raw_hits": self.raw_hits,
            "raw_stall_time": self.raw_stall_time,
            "staleness": list(self.staleness),
        }
        tl = Timeline(self.events, total, bounds, stats)
        summary = self._summary(tl)
        return SimResult(self.policy, self.cfg, tl, summary,
                         state=self.state, store=self.store)

    def _summary(self, tl: Timeline) -> dict:
        cats = breakdown(tl)
        ex = sum(cats[c] for c in (CAT_TMLP, CAT_BMLP, CAT_EMB, CAT_TRANSFER))
        _, gpu_frac, _ = utilization(tl, RES_GPU)
        _, media_frac, _ = utilization(tl, RES_MEDIA)
        summary = {
            "policy": self.policy.value,
            "model": self.cfg.name,
            "n_batches": self.n_batches,
            "seed": self.seed,
            "functional": self.functional,
            "checkpointing": self.checkpointing,
            "total_time": tl.total_time,
            "per_batch_time": tl.total_time / self.n_batches,
            "breakdown": {c: cats[c] for c in CATEGORIES},
            "ex_checkpoint_time": ex,
            "gpu_utilization": gpu_frac,
            "media_utilization": media_frac,
            "raw_hits": self.raw_hits,
            "raw_stall_time": self.raw_stall_time,
            "staleness": list(self.staleness),
            "max_staleness": max(self.staleness, default=0),
            "media": self.media.name,
            "media_read_bytes": self.read_bytes,
            "media_write_bytes": self.write_bytes,
            "config_hash": config_hash(self.cfg).hex(),
            "final_loss": self.final_loss,
            "persist_events": (self.store.persist_event_count
                               if self.store is not None else None),
        }
        return summary


def _relaxed_residual(state: TrainState, next_batch: SparseBatch,
                      emb_grads, lr: float) -> float:
    """Worst-case float64 gap between corrected stale sums and pooling
    over rows pushed through the real float32 update kernel.  Called
    with pre-update tables and the in-flight batch's gradients."""
    worst = 0.0
    for tab, idx, (rows, g) in zip(state.tables, next_batch.indices,
                                   emb_grads):
        gathered = tab[idx].astype(np.float64)
        stale = gathered.sum(axis=0)
        corr = np.zeros(tab.shape[1], dtype=np.float64)
        post = gathered.copy()
        if len(rows) and len(idx):
            pos = np.searchsorted(rows, idx)
            pos_c = np.minimum(pos, len(rows) - 1)
            mask = rows[pos_c] == idx
            if mask.any():
                corr = g[pos_c[mask]].astype(np.float64).sum(axis=0)
                updated = apply_row_update(tab[rows], g, lr)
                post[mask] = updated[pos_c[mask]].astype(np.float64)
        lhs = stale - float(lr) * corr
        rhs = post.sum(axis=0)
        if lhs.size:
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def run_policy(policy: Policy | str, cfg: ModelConfig,
               profiles: ProfileSet | None = None,
               options: SimOptions | None = None, *,
               n_batches: int = 8, seed: int = 42) -> SimResult:
    """Simulate ``n_batches`` training steps under one storage policy."""
    if n_batches < 1:
        raise SimError("n_batches must be >= 1")
    policy = Policy(policy)
    profiles = profiles if profiles is not None else default_profiles()
    options = options if options is not None else SimOptions()
    return _Run(policy, cfg, profiles, options, n_batches, seed).run()


def resume_training(cfg: ModelConfig, recovery: RecoveryResult,
                    n_batches: int, seed: int,
                    options: SimOptions | None = None) -> TrainState:
    """Rebuild the engine from a recovery image and train through the
    remaining batches of the original run."""
    opts = options if options is not None else SimOptions()
    state = init_state(cfg, seed)
    state.tables = [t.copy() for t in recovery.tables]
    deserialize_mlp(state, recovery.mlp_image)
    prev = None
    for i in range(n_batches):
        b = gen_batch(cfg, seed, i, prev=prev, reuse_rate=opts.reuse_rate,
                      zipf_s=opts.zipf_exponent)
        if i >= recovery.resume_batch:
            train_batch(state, b)
        prev = b
    return state


# --- timeline analysis ------------------------------------------------------

def breakdown(timeline: Timeline,
              span: tuple[float, float] | None = None) -> dict:
    """Critical-path time per category over ``span``: each instant is
    charged to the highest-priority active category, gaps to Idle."""
    if span is None:
        span = (0.0, timeline.total_time)
    lo, hi = span
    evs = [e for e in timeline.events
           if e.category != CAT_IDLE and e.end > lo and e.start < hi]
    cuts = {lo, hi}
    for e in evs:
        if lo < e.start < hi:
            cuts.add(e.start)
        if lo < e.end < hi:
            cuts.add(e.end)
    times = sorted(cuts)
    totals = {c: 0.0 for c in CATEGORIES}
    for a, b in zip(times, times[1:]):
        active = {e.category for e in evs if e.start < b and e.end > a}
        for cat in CATEGORY_PRIORITY:
            if cat in active:
                totals[cat] += b - a
                break
        else:
            totals[CAT_IDLE] += b - a
    return totals


def _merged_intervals(timeline: Timeline, resource: str,
                      span: tuple[float, float] | None):
    ivs = sorted((e.start, e.end) for e in timeline.events
                 if e.resource == resource)
    if span is not None:
        lo, hi = span
        ivs = [(max(s, lo), min(e, hi)) for s, e in ivs if e > lo and s < hi]
    merged = []
    for s, e in ivs:
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def utilization(timeline: Timeline, resource: str,
                span: tuple[float, float] | None = None):
    """(busy seconds, busy fraction, merged busy intervals)."""
    if span is None:
        span = (0.0, timeline.total_time)
    merged = _merged_intervals(timeline, resource, span)
    busy = sum(e - s for s, e in merged)
    width = span[1] - span[0]
    frac = busy / width if width > 0 else 0.0
    return busy, frac, merged


def idle_gaps(timeline: Timeline, resource: str,
              span: tuple[float, float] | None = None):
    """Gaps where ``resource`` sits idle inside ``span``, longest first."""
    if span is None:
        span = (0.0, timeline.total_time)
    merged = _merged_intervals(timeline, resource, span)
    gaps = []
    cursor = span[0]
    for s, e in merged:
        if s > cursor:
            gaps.append((cursor, s))
        cursor = max(cursor, e)
    if cursor < span[1]:
        gaps.append((cursor, span[1]))
    return sorted(gaps, key=lambda g: g[1] - g[0], reverse=True)


# --- exports ----------------------------------------------------------------

def timeline_csv(result: SimResult, path) -> None:
    """One row per event; times in integer nanoseconds."""
    with open(path, "w") as f:
        f.write(f"# policy={result.policy.value} model={result.cfg.name} "
                f"config={result.summary['config_hash']}\n")
        f.write("resource,category,start_ns,end_ns,bytes,batch\n")
        for e in result.timeline.events:
            f.write(f"{e.resource},{e.category},{round(e.start * 1e9)},"
                    f"{round(e.end * 1e9)},{e.nbytes},{e.batch}\n")


def breakdown_csv(results: list[SimResult], path) -> None:
    """Long-form per-category critical-path seconds for several runs."""
    with open(path, "w") as f:
        f.write("policy,model,category,seconds\n")
        for r in results:
            for cat in CATEGORIES:
                f.write(f"{r.policy.value},{r.cfg.name},{cat},"
                        f"{r.summary['breakdown'][cat]:.9e}\n")
