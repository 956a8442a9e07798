"""Timing and energy models for memory media and interconnect links.

Two layers of cost model live here.  ``access_time`` prices a single
request end to end: full device latency plus a bandwidth term rounded up
to the device's access granularity.  ``burst_time`` prices a stream of
back-to-back requests the way a pipelined memory controller services
them: one exposed latency up front, then the summed bandwidth terms,
optionally spread over parallel channels.  Schedulers should use
``burst_time`` for bulk phases (lookups, row logs, page flushes) and
``access_time`` for isolated accesses.

Read-after-write interference is modeled as a latency multiplier on
reads that land inside a configurable window after a write to an
overlapping range.  ``WriteHistory`` tracks completed writes for the
per-request path; stream-level stall accounting for bursts is in
``burst_raw_stall``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

CACHELINE = 64


class InvalidRequestError(ValueError):
    """Raised for malformed access requests or profile parameters."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidRequestError(msg)


@dataclass(frozen=True)
class DeviceProfile:
    """Latency/bandwidth/energy envelope of one memory medium.

    Latencies in seconds, bandwidths in bytes/second, energies in
    joules per byte, static power in watts.  ``access_granularity`` is
    the minimum transfer unit; requests are charged in whole units.
    ``raw_penalty_factor`` multiplies read latency when the read hits a
    recently written range (within ``raw_window`` seconds).
    """

    name: str
    read_latency: float
    write_latency: float
    read_bandwidth: float
    write_bandwidth: float
    access_granularity: int = CACHELINE
    raw_penalty_factor: float = 1.0
    raw_window: float = 1e-6
    energy_read: float = 0.0   # J/B
    energy_write: float = 0.0  # J/B
    energy_static: float = 0.0  # W

    def __post_init__(self) -> None:
        _require(self.read_latency > 0 and self.write_latency > 0,
                 f"{self.name}: latencies must be positive")
        _require(self.read_bandwidth > 0 and self.write_bandwidth > 0,
                 f"{self.name}: bandwidths must be positive")
        _require(self.access_granularity >= 1,
                 f"{self.name}: access_granularity must be >= 1")
        _require(self.raw_penalty_factor >= 1.0,
                 f"{self.name}: raw_penalty_factor must be >= 1")
        _require(self.raw_window >= 0,
                 f"{self.name}: raw_window must be >= 0")
        _require(self.energy_read >= 0 and self.energy_write >= 0
                 and self.energy_static >= 0,
                 f"{self.name}: energies must be >= 0")

    def chargeable_bytes(self, length: int) -> int:
        """Bytes actually moved for a request of ``length`` bytes."""
        _require(length >= 0, "length must be >= 0")
        if length == 0:
            return 0
        units = -(-length // self.access_granularity)
        return units * self.access_granularity


@dataclass(frozen=True)
class LinkProfile:
    """Point-to-point interconnect: fixed per-transfer latency plus
    cacheline-granular bandwidth."""

    name: str
    per_transfer_latency: float
    bandwidth: float
    cacheline: int = CACHELINE

    def __post_init__(self) -> None:
        _require(self.per_transfer_latency >= 0,
                 f"{self.name}: latency must be >= 0")
        _require(self.bandwidth > 0, f"{self.name}: bandwidth must be positive")
        _require(self.cacheline >= 1, f"{self.name}: cacheline must be >= 1")


@dataclass(frozen=True)
class AccessRequest:
    """One read or write against a device address range."""

    kind: str  # 'read' | 'write'
    offset: int
    length: int
    issue_time: float = 0.0

    def __post_init__(self) -> None:
        _require(self.kind in ("read", "write"),
                 f"kind must be 'read' or 'write', got {self.kind!r}")
        _require(self.offset >= 0, "offset must be >= 0")
        _require(self.length >= 1, "length must be >= 1")
        _require(self.issue_time >= 0, "issue_time must be >= 0")

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass
class WriteHistory:
    """Completed writes, kept as (offset, end, completion_time) tuples.

    Used by the RAW check on the single-request path.  ``prune`` drops
    entries that can no longer penalize any future read.
    """

    entries: list[tuple[int, int, float]] = field(default_factory=list)

    def record(self, req: AccessRequest, completion_time: float) -> None:
        _require(req.kind == "write", "history records writes only")
        self.entries.append((req.offset, req.end, completion_time))

    def prune(self, now: float, window: float) -> None:
        cutoff = now - window
        self.entries = [e for e in self.entries if e[2] >= cutoff]

    def overlaps(self, req: AccessRequest, window: float) -> bool:
        for off, end, done in self.entries:
            if off < req.end and req.offset < end:
                if 0.0 <= req.issue_time - done <= window:
                    return True
        return False


def raw_overlap(history: WriteHistory | None, req: AccessRequest,
                window: float) -> bool:
    """True when ``req`` is a read landing within ``window`` seconds
    after a completed write to an overlapping byte range."""
    if history is None or req.kind != "read":
        return False
    return history.overlaps(req, window)


def access_time(profile: DeviceProfile, req: AccessRequest,
                history: WriteHistory | None = None) -> float:
    """End-to-end service time of one request.

    latency (scaled by the RAW factor for penalized reads) plus
    granularity-rounded bytes over the direction's bandwidth.
    """
    nbytes = profile.chargeable_bytes(req.length)
    if req.kind == "read":
        lat = profile.read_latency
        if raw_overlap(history, req, profile.raw_window):
            lat *= profile.raw_penalty_factor
        return lat + nbytes / profile.read_bandwidth
    lat = profile.write_latency
    return lat + nbytes / profile.write_bandwidth


def access_energy(profile: DeviceProfile, req: AccessRequest) -> float:
    """Dynamic energy of one request: chargeable bytes times the
    direction's per-byte coefficient."""
    nbytes = profile.chargeable_bytes(req.length)
    coef = profile.energy_read if req.kind == "read" else profile.energy_write
    return nbytes * coef


def transfer_time(link: LinkProfile, nbytes: int) -> float:
    """One link transfer: fixed latency plus cacheline-rounded payload."""
    _require(nbytes >= 0, "nbytes must be >= 0")
    if nbytes == 0:
        return link.per_transfer_latency
    lines = -(-nbytes // link.cacheline)
    return link.per_transfer_latency + lines * link.cacheline / link.bandwidth


def burst_time(profile: DeviceProfile, kind: str, count: int,
               bytes_each: int, channels: int = 1) -> float:
    """Service time of ``count`` same-direction requests issued
    back to back.

    The pipeline exposes a single latency; every request then pays its
    granularity-rounded bandwidth term, divided across ``channels``
    parallel banks.  Zero requests cost zero.
    """
    _require(kind in ("read", "write"), "kind must be 'read' or 'write'")
    _require(count >= 0, "count must be >= 0")
    _require(channels >= 1, "channels must be >= 1")
    if count == 0:
        return 0.0
    nbytes = profile.chargeable_bytes(bytes_each)
    if kind == "read":
        lat, bw = profile.read_latency, profile.read_bandwidth
    else:
        lat, bw = profile.write_latency, profile.write_bandwidth
    return lat + count * nbytes / (bw * channels)


def burst_bytes(profile: DeviceProfile, count: int, bytes_each: int) -> int:
    """Chargeable bytes moved by a burst (for energy accounting)."""
    _require(count >= 0, "count must be >= 0")
    return count * profile.chargeable_bytes(bytes_each)


def burst_raw_stall(profile: DeviceProfile, hits: int,
                    stall_concurrency: float = 1.0) -> float:
    """Extra stream time when ``hits`` reads in a burst are RAW-penalized.

    Each penalized read re-exposes the latency difference
    (factor - 1) * read_latency; overlapping stalls absorb each other
    with effective concurrency ``stall_concurrency``.  Continuous in the
    factor: vanishes as factor -> 1.
    """
    _require(hits >= 0, "hits must be >= 0")
    _require(stall_concurrency > 0, "stall_concurrency must be positive")
    if hits == 0:
        return 0.0
    per = (profile.raw_penalty_factor - 1.0) * profile.read_latency
    return hits * per / stall_concurrency


# --- stock profiles ---------------------------------------------------------
#
# The DRAM profile anchors everything; PMEM and SSD are derived by fixed
# ratios so tests can assert relative numbers without caring about the
# absolute anchor.

def dram_profile() -> DeviceProfile:
    return DeviceProfile(
        name="dram",
        read_latency=80e-9,
        write_latency=80e-9,
        read_bandwidth=20e9,
        write_bandwidth=20e9,
        access_granularity=CACHELINE,
        raw_penalty_factor=1.0,
        energy_read=1.0e-12,
        energy_write=1.0e-12,
        energy_static=1.0,
    )


def pmem_profile(dram: DeviceProfile | None = None) -> DeviceProfile:
    """Persistent memory relative to DRAM: 3x read / 7x write latency,
    0.6x read / 0.1x write bandwidth, RAW-prone."""
    d = dram or dram_profile()
    return DeviceProfile(
        name="pmem",
        read_latency=3.0 * d.read_latency,
        write_latency=7.0 * d.write_latency,
        read_bandwidth=0.6 * d.read_bandwidth,
        write_bandwidth=0.1 * d.write_bandwidth,
        access_granularity=d.access_granularity,
        raw_penalty_factor=2.0,
        raw_window=1e-6,
        energy_read=0.5e-12,
        energy_write=2.0e-12,
        energy_static=0.11,
    )


def ssd_profile(dram: DeviceProfile | None = None) -> DeviceProfile:
    """Flash SSD relative to DRAM: 165x latency, 0.02x bandwidth,
    4 KiB page granularity."""
    d = dram or dram_profile()
    return DeviceProfile(
        name="ssd",
        read_latency=165.0 * d.read_latency,
        write_latency=165.0 * d.write_latency,
        read_bandwidth=0.02 * d.read_bandwidth,
        write_bandwidth=0.02 * d.write_bandwidth,
        access_granularity=4096,
        raw_penalty_factor=1.0,
        energy_read=0.1e-12,
        energy_write=0.2e-12,
        energy_static=1.0,
    )
