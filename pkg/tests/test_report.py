"""Energy accounting tests: per-byte dynamic charges, standing power,
the DRAM reference flow, and the comparison table."""

import pytest

from trainsim.report import (DRAM_IDEAL, DRAM_MODULE_MULTIPLIER, EnergyReport,
                             compare_energy, dram_ideal_run, energy_of,
                             energy_csv)
from trainsim.scenarios import toy_config
from trainsim.sim import (CAT_CKPT, Policy, SimOptions, SimResult, breakdown,
                          default_profiles, run_policy)
from trainsim.workload import builtin_config


def test_energy_of_hand_priced():
    prof = default_profiles()
    r = run_policy(Policy.PMEM, toy_config(), prof, SimOptions(),
                   n_batches=2, seed=1)
    rep = energy_of(r, prof.pmem)
    s = r.summary
    dyn = (s["media_read_bytes"] * prof.pmem.energy_read
           + s["media_write_bytes"] * prof.pmem.energy_write)
    stat = prof.pmem.energy_static * s["total_time"]
    assert rep.dynamic_j == pytest.approx(dyn, rel=1e-12)
    assert rep.static_j == pytest.approx(stat, rel=1e-12)
    assert rep.total_j == pytest.approx(dyn + stat, rel=1e-12)
    assert rep.device == prof.pmem.name


def test_static_multiplier_scales_static_term_only():
    prof = default_profiles()
    r = run_policy(Policy.PMEM, toy_config(), prof, SimOptions(),
                   n_batches=2, seed=1)
    one = energy_of(r, prof.pmem)
    four = energy_of(r, prof.pmem, static_multiplier=4.0)
    assert four.static_j == pytest.approx(4 * one.static_j, rel=1e-12)
    assert four.dynamic_j == one.dynamic_j


def test_dram_ideal_run_has_no_checkpointing():
    prof = default_profiles()
    result, rep = dram_ideal_run(toy_config(), prof, n_batches=3, seed=2)
    assert breakdown(result.timeline)[CAT_CKPT] == 0.0
    assert result.summary["media"] == prof.dram.name
    assert rep.policy == DRAM_IDEAL
    assert rep.static_j == pytest.approx(
        prof.dram.energy_static * DRAM_MODULE_MULTIPLIER
        * result.summary["total_time"], rel=1e-12)


def test_dram_ideal_does_not_mutate_caller_options():
    opts = SimOptions()
    dram_ideal_run(toy_config(), default_profiles(), opts, n_batches=2, seed=2)
    assert opts.checkpoint_enabled
    assert opts.media_override is None


def test_compare_energy_table():
    reps = compare_energy(builtin_config("rm1"), n_batches=4, seed=42)
    by_policy = {r.policy: r for r in reps}
    assert set(by_policy) == {"SSD", "PMEM", DRAM_IDEAL, "CXL"}
    assert by_policy["PMEM"].normalized == pytest.approx(1.0)
    cxl = by_policy["CXL"]
    for name, rep in by_policy.items():
        if name != "CXL":
            assert cxl.total_j < 0.95 * rep.total_j, name
    assert by_policy["SSD"].total_j == max(r.total_j for r in reps)


def test_energy_csv_round_trip(tmp_path):
    reps = [EnergyReport("CXL", "rm-toy", "pmem", 1.5e-6, 2.5e-6, 4.0e-6, 0.5)]
    path = tmp_path / "energy.csv"
    energy_csv(reps, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "policy,model,device,dynamic_j,static_j,total_j,normalized"
    pol, model, dev, dyn, stat, tot, norm = lines[1].split(",")
    assert (pol, model, dev) == ("CXL", "rm-toy", "pmem")
    assert float(dyn) == pytest.approx(1.5e-6)
    assert float(tot) == pytest.approx(4.0e-6)
    assert float(norm) == pytest.approx(0.5)
