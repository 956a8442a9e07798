"""Device timing/energy model tests.

Oracle values are computed by hand from the profile definitions and
frozen here; the model must reproduce them exactly (float equality where
the arithmetic is exact, tight tolerances elsewhere).
"""

import math

import pytest
from hypothesis import given, strategies as st

from trainsim.devices import (
    CACHELINE,
    AccessRequest,
    DeviceProfile,
    InvalidRequestError,
    LinkProfile,
    WriteHistory,
    access_energy,
    access_time,
    burst_bytes,
    burst_raw_stall,
    burst_time,
    dram_profile,
    pmem_profile,
    raw_overlap,
    ssd_profile,
    transfer_time,
)


# --- frozen oracles ---------------------------------------------------------

def test_dram_64b_read_oracle():
    # 80 ns + 64 B / 20 GB/s = 80 ns + 3.2 ns
    t = access_time(dram_profile(), AccessRequest("read", 0, 64))
    assert t == pytest.approx(83.2e-9, rel=1e-12)


def test_dram_one_byte_rounds_to_cacheline():
    p = dram_profile()
    t1 = access_time(p, AccessRequest("read", 0, 1))
    t64 = access_time(p, AccessRequest("read", 0, 64))
    assert t1 == t64


def test_pmem_raw_penalized_read_oracle():
    # 2.0 * 240 ns + 64 B / 12 GB/s = 480 ns + 5.3333 ns
    p = pmem_profile()
    hist = WriteHistory()
    hist.record(AccessRequest("write", 0, 64), completion_time=0.0)
    t = access_time(p, AccessRequest("read", 0, 64, issue_time=0.5e-6), hist)
    assert t == pytest.approx(485.3333e-9, rel=1e-4)


def test_pmem_unpenalized_read_oracle():
    p = pmem_profile()
    t = access_time(p, AccessRequest("read", 0, 64))
    assert t == pytest.approx(240e-9 + 64 / 12e9, rel=1e-12)


def test_ssd_small_write_charges_full_page():
    p = ssd_profile()
    # 13.2 us + 4096 B / 400 MB/s = 13.2 us + 10.24 us
    t = access_time(p, AccessRequest("write", 0, 128))
    assert t == pytest.approx(13.2e-6 + 4096 / 0.4e9, rel=1e-12)
    assert p.chargeable_bytes(128) == 4096


def test_profile_ratio_fidelity_exact():
    d = dram_profile()
    pm = pmem_profile(d)
    sd = ssd_profile(d)
    assert pm.read_latency == 3.0 * d.read_latency
    assert pm.write_latency == 7.0 * d.write_latency
    assert pm.read_bandwidth == 0.6 * d.read_bandwidth
    assert pm.write_bandwidth == 0.1 * d.write_bandwidth
    assert sd.read_latency == 165.0 * d.read_latency
    assert sd.write_latency == 165.0 * d.write_latency
    assert sd.read_bandwidth == 0.02 * d.read_bandwidth
    assert sd.write_bandwidth == 0.02 * d.write_bandwidth
    assert sd.access_granularity == 4096


def test_transfer_time_oracle():
    link = LinkProfile("lnk", per_transfer_latency=500e-9, bandwidth=64e9)
    # 500 ns + 2 lines * 64 / 64 GB/s = 500 ns + 2 ns
    assert transfer_time(link, 100) == pytest.approx(502e-9, rel=1e-12)
    assert transfer_time(link, 0) == 500e-9


def test_burst_time_oracle():
    p = dram_profile()
    # one latency + 10 * 64 / 20e9
    t = burst_time(p, "read", 10, 64)
    assert t == pytest.approx(80e-9 + 10 * 64 / 20e9, rel=1e-12)
    # channels divide the bandwidth term only
    t2 = burst_time(p, "read", 10, 64, channels=2)
    assert t2 == pytest.approx(80e-9 + 10 * 64 / 40e9, rel=1e-12)
    assert burst_time(p, "read", 0, 64) == 0.0


def test_burst_raw_stall_oracle():
    p = pmem_profile()
    # (2 - 1) * 240 ns per hit, 4 hits, concurrency 2
    assert burst_raw_stall(p, 4, 2.0) == pytest.approx(4 * 240e-9 / 2, rel=1e-12)
    assert burst_raw_stall(p, 0, 2.0) == 0.0
    # no penalty factor -> no stall regardless of hits
    assert burst_raw_stall(dram_profile(), 100, 1.0) == 0.0


def test_access_energy_oracle():
    p = pmem_profile()
    # write 100 B -> 128 B charged * 2.0 pJ/B
    e = access_energy(p, AccessRequest("write", 0, 100))
    assert e == pytest.approx(128 * 2.0e-12, rel=1e-12)
    e = access_energy(p, AccessRequest("read", 0, 100))
    assert e == pytest.approx(128 * 0.5e-12, rel=1e-12)


def test_burst_bytes_oracle():
    assert burst_bytes(ssd_profile(), 3, 100) == 3 * 4096
    assert burst_bytes(dram_profile(), 3, 100) == 3 * 128


# --- RAW window semantics ---------------------------------------------------

def test_raw_applies_only_inside_window():
    p = pmem_profile()
    hist = WriteHistory()
    hist.record(AccessRequest("write", 0, 64), completion_time=0.0)
    inside = AccessRequest("read", 0, 64, issue_time=0.9e-6)
    outside = AccessRequest("read", 0, 64, issue_time=2e-6)
    assert raw_overlap(hist, inside, p.raw_window)
    assert not raw_overlap(hist, outside, p.raw_window)
    assert access_time(p, outside, hist) < access_time(p, inside, hist)


def test_raw_requires_range_overlap():
    p = pmem_profile()
    hist = WriteHistory()
    hist.record(AccessRequest("write", 0, 64), completion_time=0.0)
    disjoint = AccessRequest("read", 64, 64, issue_time=0.5e-6)
    assert not raw_overlap(hist, disjoint, p.raw_window)


def test_raw_ignores_writes_and_reads_before_write_completes():
    p = pmem_profile()
    hist = WriteHistory()
    hist.record(AccessRequest("write", 0, 64), completion_time=1e-6)
    early = AccessRequest("read", 0, 64, issue_time=0.5e-6)
    assert not raw_overlap(hist, early, p.raw_window)
    w = AccessRequest("write", 0, 64, issue_time=1.2e-6)
    assert not raw_overlap(hist, w, p.raw_window)


def test_history_prune():
    hist = WriteHistory()
    hist.record(AccessRequest("write", 0, 64), completion_time=0.0)
    hist.record(AccessRequest("write", 64, 64), completion_time=5e-6)
    hist.prune(now=6e-6, window=2e-6)
    assert len(hist.entries) == 1
    assert hist.entries[0][2] == 5e-6


# --- validation -------------------------------------------------------------

def test_invalid_requests_rejected():
    with pytest.raises(InvalidRequestError):
        AccessRequest("modify", 0, 64)
    with pytest.raises(InvalidRequestError):
        AccessRequest("read", -1, 64)
    with pytest.raises(InvalidRequestError):
        AccessRequest("read", 0, 0)


def test_invalid_profiles_rejected():
    with pytest.raises(InvalidRequestError):
        DeviceProfile("bad", -1e-9, 1e-9, 1e9, 1e9)
    with pytest.raises(InvalidRequestError):
        DeviceProfile("bad", 1e-9, 1e-9, 0, 1e9)
    with pytest.raises(InvalidRequestError):
        DeviceProfile("bad", 1e-9, 1e-9, 1e9, 1e9, raw_penalty_factor=0.5)


def test_burst_validation():
    p = dram_profile()
    with pytest.raises(InvalidRequestError):
        burst_time(p, "erase", 1, 64)
    with pytest.raises(InvalidRequestError):
        burst_time(p, "read", -1, 64)
    with pytest.raises(InvalidRequestError):
        burst_time(p, "read", 1, 64, channels=0)


# --- properties -------------------------------------------------------------

@given(st.integers(min_value=1, max_value=1 << 20),
       st.integers(min_value=1, max_value=1 << 20))
def test_access_time_monotone_in_length(a, b):
    p = pmem_profile()
    ta = access_time(p, AccessRequest("read", 0, a))
    tb = access_time(p, AccessRequest("read", 0, b))
    if a <= b:
        assert ta <= tb
    else:
        assert ta >= tb


@given(st.floats(min_value=1.0, max_value=10.0),
       st.floats(min_value=1.0, max_value=10.0))
def test_raw_factor_monotone(f1, f2):
    hist = WriteHistory()
    hist.record(AccessRequest("write", 0, 64), completion_time=0.0)
    req = AccessRequest("read", 0, 64, issue_time=0.1e-6)

    def t(f):
        p = DeviceProfile("x", 100e-9, 100e-9, 1e9, 1e9,
                          raw_penalty_factor=f, raw_window=1e-6)
        return access_time(p, req, hist)

    if f1 <= f2:
        assert t(f1) <= t(f2)
    else:
        assert t(f1) >= t(f2)


@given(st.integers(min_value=1, max_value=1 << 16))
def test_ssd_chargeable_bytes_page_multiple(n):
    p = ssd_profile()
    c = p.chargeable_bytes(n)
    assert c % 4096 == 0
    assert c >= n
    assert c - n < 4096


@given(st.integers(min_value=0, max_value=1000),
       st.integers(min_value=0, max_value=1000))
def test_burst_superadditive_split(c1, c2):
    # splitting a burst exposes an extra latency, so never cheaper together
    p = pmem_profile()
    whole = burst_time(p, "write", c1 + c2, 128)
    split = burst_time(p, "write", c1, 128) + burst_time(p, "write", c2, 128)
    assert whole <= split + 1e-18


@given(st.integers(min_value=1, max_value=100),
       st.integers(min_value=1, max_value=8))
def test_burst_channels_never_slower(count, ch):
    p = pmem_profile()
    assert burst_time(p, "write", count, 128, channels=ch) <= \
        burst_time(p, "write", count, 128, channels=1) + 1e-18
