"""Scheduler tests.

Hand-priced oracles pin the GPU cost model, the critical-path
breakdown, and the demo scenario's round-number phases; structural
tests cover policy orderings, hazard-stall asymmetry, staleness
bounds, and the functional cross-checks (identical final states,
crash-resume equality, timing independence from functional mode).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trainsim.engine import serialize_mlp, states_equal
from trainsim.scenarios import (DEMO_BATCH_POST, DEMO_BATCH_WINDOWED,
                                DEMO_LOOKUP, DEMO_RESIDUAL, DEMO_WINDOW,
                                toy_config, utilization_demo)
from trainsim.sim import (CAT_BMLP, CAT_CKPT, CAT_EMB, CAT_IDLE, CAT_TMLP,
                          CAT_TRANSFER, CATEGORIES, CostParams, Event, Policy,
                          RES_GPU, RES_MEDIA, SimError, SimOptions, Timeline,
                          breakdown, breakdown_csv, default_profiles,
                          gpu_phase_times, idle_gaps, mac_counts,
                          resume_training, run_policy, timeline_csv,
                          utilization)
from trainsim.store import recover
from trainsim.workload import builtin_config


def make_timeline(events, total=None):
    t = total if total is not None else max(e.end for e in events)
    return Timeline(list(events), t, [(0.0, t)], {})


# --- GPU cost model ---------------------------------------------------------

def test_mac_counts_rm1():
    f_b, f_t = mac_counts(builtin_config("rm1"))
    # 13*8192 + 8192*2048 + 2048*32 and 672*256 + 256*64 + 64*1
    assert f_b == 16_949_248
    assert f_t == 188_480


def test_gpu_phase_times_hand_priced():
    cfg = builtin_config("rm1")
    cost = CostParams()
    b, w = gpu_phase_times(cfg, cost)
    b_ref = 3 * 3e-6 + 64 * 16_949_248 * 5.5e-14
    w_ref = 6 * 3e-6 + 64 * (3 * 188_480 + 2 * 16_949_248) * 5.5e-14
    assert b == pytest.approx(b_ref, rel=1e-12)
    assert w == pytest.approx(w_ref, rel=1e-12)


# --- breakdown / utilization oracles ----------------------------------------

def test_breakdown_single_event():
    tl = make_timeline([Event(RES_GPU, CAT_TMLP, 0.0, 1e-3)])
    cats = breakdown(tl)
    assert cats[CAT_TMLP] == pytest.approx(1e-3)
    assert cats[CAT_IDLE] == 0.0


def test_breakdown_hidden_checkpoint_counts_zero():
    tl = make_timeline([Event(RES_GPU, CAT_TMLP, 0.0, 1e-3),
                        Event(RES_MEDIA, CAT_CKPT, 2e-4, 8e-4)])
    cats = breakdown(tl)
    assert cats[CAT_TMLP] == pytest.approx(1e-3)
    assert cats[CAT_CKPT] == 0.0


def test_breakdown_residual_is_alone_active_tail():
    tl = make_timeline([Event(RES_GPU, CAT_TMLP, 0.0, 1e-3),
                        Event(RES_MEDIA, CAT_CKPT, 8e-4, 1.2e-3)])
    cats = breakdown(tl)
    assert cats[CAT_TMLP] == pytest.approx(1e-3)
    assert cats[CAT_CKPT] == pytest.approx(2e-4)


def test_breakdown_priority_order():
    # all five categories stacked on the same second
    evs = [Event("r", c, 0.0, 1.0) for c in
           (CAT_CKPT, CAT_TRANSFER, CAT_EMB, CAT_BMLP, CAT_TMLP)]
    cats = breakdown(make_timeline(evs))
    assert cats[CAT_TMLP] == pytest.approx(1.0)
    assert sum(cats[c] for c in CATEGORIES if c != CAT_TMLP) == 0.0


def test_breakdown_idle_gap():
    tl = make_timeline([Event("r", CAT_EMB, 0.0, 1.0),
                        Event("r", CAT_EMB, 3.0, 4.0)], total=4.0)
    cats = breakdown(tl)
    assert cats[CAT_EMB] == pytest.approx(2.0)
    assert cats[CAT_IDLE] == pytest.approx(2.0)


def test_utilization_merges_overlaps():
    tl = make_timeline([Event("m", CAT_EMB, 0.0, 2.0),
                        Event("m", CAT_EMB, 1.0, 3.0),
                        Event("m", CAT_CKPT, 5.0, 6.0)], total=10.0)
    busy, frac, merged = utilization(tl, "m")
    assert busy == pytest.approx(4.0)
    assert frac == pytest.approx(0.4)
    assert merged == [(0.0, 3.0), (5.0, 6.0)]
    gaps = idle_gaps(tl, "m")
    assert gaps[0] == (6.0, 10.0)
    assert (3.0, 5.0) in gaps


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([CAT_TMLP, CAT_BMLP, CAT_EMB,
                                           CAT_TRANSFER, CAT_CKPT]),
                          st.floats(0, 9), st.floats(0.01, 3)),
                min_size=1, max_size=12))
def test_breakdown_partitions_span(evs):
    events = [Event("r", c, s, s + d) for c, s, d in evs]
    tl = make_timeline(events, total=13.0)
    cats = breakdown(tl)
    assert sum(cats.values()) == pytest.approx(13.0, abs=1e-9)
    assert all(v >= 0 for v in cats.values())


# --- demo scenario ----------------------------------------------------------

@pytest.fixture(scope="module")
def demo_runs():
    cfg, prof, opts = utilization_demo()
    return {p: run_policy(p, cfg, prof, opts, n_batches=3, seed=42)
            for p in (Policy.CXL_D, Policy.CXL_B)}


def test_demo_batch_spans(demo_runs):
    end_d = demo_runs[Policy.CXL_D].timeline.batch_bounds[0][1]
    end_b = demo_runs[Policy.CXL_B].timeline.batch_bounds[0][1]
    assert end_d == pytest.approx(DEMO_BATCH_POST, abs=5e-5)
    assert end_b == pytest.approx(DEMO_BATCH_WINDOWED, abs=5e-5)
    assert end_d - end_b == pytest.approx(DEMO_BATCH_POST - DEMO_BATCH_WINDOWED,
                                          abs=5e-5)


def test_demo_windowed_checkpoint_residual(demo_runs):
    r = demo_runs[Policy.CXL_B]
    cats = breakdown(r.timeline, span=r.timeline.batch_bounds[0])
    assert cats[CAT_CKPT] == pytest.approx(DEMO_RESIDUAL, abs=5e-5)
    assert cats[CAT_IDLE] == pytest.approx(0.0, abs=5e-5)


def test_demo_media_idles_through_window(demo_runs):
    r = demo_runs[Policy.CXL_D]
    gaps = idle_gaps(r.timeline, RES_MEDIA, span=r.timeline.batch_bounds[0])
    lo, hi = gaps[0]
    assert lo == pytest.approx(DEMO_LOOKUP, abs=5e-5)
    assert hi == pytest.approx(DEMO_LOOKUP + DEMO_WINDOW, abs=5e-5)


def test_demo_relaxed_staleness_positive_and_bounded():
    cfg, prof, opts = utilization_demo()
    r = run_policy(Policy.CXL, cfg, prof, opts, n_batches=4, seed=42)
    assert 0 < r.summary["max_staleness"] <= opts.staleness_bound


# --- policy structure -------------------------------------------------------

@pytest.fixture(scope="module")
def rm1_runs():
    cfg = builtin_config("rm1")
    prof = default_profiles()
    return {p: run_policy(p, cfg, prof, SimOptions(), n_batches=6, seed=42)
            for p in Policy}


def test_policy_ordering(rm1_runs):
    t = {p: rm1_runs[p].summary["total_time"] for p in Policy}
    assert (t[Policy.CXL] < t[Policy.CXL_B] < t[Policy.CXL_D]
            < t[Policy.PCIE] < t[Policy.PMEM] < t[Policy.SSD])


def test_raw_hits_only_on_batch_aware_undo(rm1_runs):
    for p in Policy:
        hits = rm1_runs[p].summary["raw_hits"]
        if p is Policy.CXL_B:
            assert hits > 0
        else:
            assert hits == 0


def test_raw_toggle_asymmetry():
    cfg = builtin_config("rm1")
    prof = default_profiles()
    off = SimOptions(raw_modeling=False)
    for p, changes in ((Policy.CXL_B, True), (Policy.CXL, False)):
        a = run_policy(p, cfg, prof, SimOptions(), n_batches=4, seed=42)
        b = run_policy(p, cfg, prof, off, n_batches=4, seed=42)
        if changes:
            assert a.summary["total_time"] > b.summary["total_time"]
        else:
            assert a.summary["total_time"] == b.summary["total_time"]


def test_raw_hits_track_reuse():
    cfg = builtin_config("rm1")
    prof = default_profiles()
    hi = run_policy(Policy.CXL_B, cfg, prof, SimOptions(reuse_rate=0.8),
                    n_batches=4, seed=42)
    lo = run_policy(Policy.CXL_B, cfg, prof, SimOptions(reuse_rate=0.2),
                    n_batches=4, seed=42)
    assert hi.summary["raw_hits"] > 2.5 * lo.summary["raw_hits"]


def test_undo_equals_redo_without_checkpointing():
    cfg = builtin_config("rm1")
    prof = default_profiles()
    opts = SimOptions(checkpoint_enabled=False)
    b = run_policy(Policy.CXL_B, cfg, prof, opts, n_batches=4, seed=42)
    d = run_policy(Policy.CXL_D, cfg, prof, opts, n_batches=4, seed=42)
    assert b.summary["total_time"] == pytest.approx(
        d.summary["total_time"], rel=1e-12)


def test_checkpointing_costs_time():
    cfg = builtin_config("rm1")
    prof = default_profiles()
    on = run_policy(Policy.CXL_D, cfg, prof, SimOptions(), n_batches=4, seed=42)
    off = run_policy(Policy.CXL_D, cfg, prof,
                     SimOptions(checkpoint_enabled=False), n_batches=4, seed=42)
    assert on.summary["total_time"] > off.summary["total_time"]
    assert breakdown(off.timeline)[CAT_CKPT] == 0.0


def test_flash_page_amplification_dominates():
    cfg = builtin_config("rm1")
    prof = default_profiles()
    ssd = run_policy(Policy.SSD, cfg, prof, SimOptions(), n_batches=2, seed=42)
    pm = run_policy(Policy.PMEM, cfg, prof, SimOptions(), n_batches=2, seed=42)
    assert (ssd.summary["ex_checkpoint_time"]
            >= 100 * pm.summary["ex_checkpoint_time"])


def test_run_policy_rejects_bad_arguments():
    cfg = toy_config()
    with pytest.raises(SimError):
        run_policy(Policy.CXL, cfg, n_batches=0)
    with pytest.raises(ValueError):
        run_policy("NVME", cfg)


# --- functional cross-checks ------------------------------------------------

@pytest.fixture(scope="module")
def toy_functional_runs():
    cfg = toy_config()
    prof = default_profiles()
    opts = SimOptions(retain_history=True)
    return {p: run_policy(p, cfg, prof, opts, n_batches=6, seed=7)
            for p in Policy}


def test_final_state_identical_across_policies(toy_functional_runs):
    runs = toy_functional_runs
    ref = runs[Policy.SSD]
    assert ref.summary["functional"]
    for p, r in runs.items():
        assert states_equal(r.state, ref.state), p
        assert serialize_mlp(r.state) == serialize_mlp(ref.state)


def test_timing_independent_of_functional_mode():
    cfg = toy_config()
    prof = default_profiles()
    a = run_policy(Policy.CXL, cfg, prof,
                   SimOptions(functional=True, mlp_chunk_bytes=256),
                   n_batches=5, seed=7)
    b = run_policy(Policy.CXL, cfg, prof,
                   SimOptions(functional=False, mlp_chunk_bytes=256),
                   n_batches=5, seed=7)
    assert a.summary["total_time"] == b.summary["total_time"]
    assert [(e.start, e.end, e.category) for e in a.timeline.events
            if e.resource == RES_MEDIA] == \
           [(e.start, e.end, e.category) for e in b.timeline.events
            if e.resource == RES_MEDIA]


@pytest.mark.parametrize("policy", [Policy.CXL_B, Policy.CXL])
def test_crash_mid_run_resumes_bit_exact(policy):
    cfg = toy_config()
    prof = default_profiles()
    opts = SimOptions(retain_history=True)
    n = 5
    full = run_policy(policy, cfg, prof, opts, n_batches=n, seed=11)
    store = full.store
    # crash two-thirds into the journal, recover, train the rest again
    idx = (2 * len(store.journal)) // 3
    rec = recover(store.crash(idx))
    assert rec.resume_batch <= n
    resumed = resume_training(cfg, rec, n, 11, opts)
    assert states_equal(resumed, full.state)


def test_clean_image_recovers_and_resumes(toy_functional_runs):
    full = toy_functional_runs[Policy.CXL]
    rec = recover(full.store.image())
    resumed = resume_training(toy_config(), rec, 6, 7,
                              SimOptions(retain_history=True))
    assert states_equal(resumed, full.state)


def test_staleness_bound_forces_flush():
    cfg, prof, _ = utilization_demo()
    loose = run_policy(Policy.CXL, cfg, prof, SimOptions(), n_batches=6,
                       seed=42)
    assert loose.summary["max_staleness"] >= 3
    tight_opts = SimOptions(staleness_bound=2)
    tight = run_policy(Policy.CXL, cfg, prof, tight_opts, n_batches=6, seed=42)
    assert 0 < tight.summary["max_staleness"] <= 2
    # the forced drain sits on the critical path
    assert tight.summary["total_time"] > loose.summary["total_time"]


def test_relaxed_verification_runs(toy_functional_runs):
    # a functional relaxed run exercises the equivalence check each batch
    r = toy_functional_runs[Policy.CXL]
    assert r.summary["functional"]
    assert r.summary["final_loss"] is not None


# --- determinism and exports ------------------------------------------------

def test_runs_are_deterministic():
    cfg = builtin_config("rm1")
    prof = default_profiles()
    a = run_policy(Policy.CXL_B, cfg, prof, SimOptions(), n_batches=3, seed=5)
    b = run_policy(Policy.CXL_B, cfg, prof, SimOptions(), n_batches=3, seed=5)
    assert a.summary == b.summary
    assert [(e.resource, e.category, e.start, e.end, e.nbytes, e.batch)
            for e in a.timeline.events] == \
           [(e.resource, e.category, e.start, e.end, e.nbytes, e.batch)
            for e in b.timeline.events]


def test_csv_exports(tmp_path):
    cfg = toy_config()
    r = run_policy(Policy.CXL_B, cfg, n_batches=2, seed=3)
    tl_path = tmp_path / "timeline.csv"
    timeline_csv(r, tl_path)
    lines = tl_path.read_text().splitlines()
    assert lines[0].startswith("# policy=CXL_B model=rm-toy config=")
    assert lines[1] == "resource,category,start_ns,end_ns,bytes,batch"
    for row in lines[2:]:
        res, cat, s_ns, e_ns, nb, batch = row.split(",")
        assert int(e_ns) >= int(s_ns) >= 0
        assert int(batch) >= 0
    bd_path = tmp_path / "breakdown.csv"
    breakdown_csv([r], bd_path)
    rows = bd_path.read_text().splitlines()
    assert rows[0] == "policy,model,category,seconds"
    assert len(rows) == 1 + len(CATEGORIES)
    total = sum(float(row.split(",")[3]) for row in rows[1:])
    assert total == pytest.approx(r.summary["total_time"], rel=1e-6)


def test_csv_byte_identical_across_runs(tmp_path):
    cfg = toy_config()
    paths = []
    for tag in ("a", "b"):
        r = run_policy(Policy.CXL, cfg, n_batches=3, seed=9)
        p = tmp_path / f"tl_{tag}.csv"
        timeline_csv(r, p)
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]
