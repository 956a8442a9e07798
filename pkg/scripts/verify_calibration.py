#!/usr/bin/env python3
"""Print the measured calibration landscape against its design targets.

Diagnostics only; the binding thresholds live in tests/test_acceptance.py.
Run from the repo root after an editable install:

    python3 scripts/verify_calibration.py
"""

import dataclasses

from trainsim.report import compare_energy
from trainsim.scenarios import utilization_demo
from trainsim.sim import Policy, SimOptions, default_profiles, run_policy
from trainsim.workload import builtin_config

BATCHES = 8
SEED = 42


def per_batch_us(policy, cfg, options=None):
    r = run_policy(policy, cfg, default_profiles(), options,
                   n_batches=BATCHES, seed=SEED)
    return r.summary["per_batch_time"] * 1e6, r


def main():
    cfg = builtin_config("rm1")

    print("== rm1 per-batch time by policy ==")
    times = {}
    for policy in Policy:
        times[policy], _ = per_batch_us(policy, cfg)
        print(f"  {policy.value:6s} {times[policy]:10.2f} us")
    order = sorted(times, key=times.get)
    print(f"  fastest-to-slowest: {' < '.join(p.value for p in order)}")

    d_hw = 100 * (times[Policy.PCIE] - times[Policy.CXL_D]) / times[Policy.PCIE]
    d_rel = 100 * (times[Policy.CXL_B] - times[Policy.CXL]) / times[Policy.CXL_B]
    print(f"\n== headline deltas (rm1) ==")
    print(f"  device vs host redo logging : {d_hw:6.2f}%  (target 23 +- 10)")
    print(f"  relaxed vs per-batch undo   : {d_rel:6.2f}%  (target 14 +- 7)")

    print(f"\n== shared-row reuse stall, rm1 ==")
    for policy in (Policy.CXL_B, Policy.CXL):
        on, _ = per_batch_us(policy, cfg, SimOptions(raw_modeling=True))
        off, _ = per_batch_us(policy, cfg, SimOptions(raw_modeling=False))
        print(f"  {policy.value:6s} toggle effect {100 * (on - off) / on:7.3f}%"
              f"  ({'expected > 0' if policy is Policy.CXL_B else 'must be 0'})")

    print(f"\n== flash page amplification ==")
    for name in ("rm1", "rm2"):
        mcfg = builtin_config(name)
        _, ssd = per_batch_us(Policy.SSD, mcfg)
        _, pm = per_batch_us(Policy.PMEM, mcfg)
        ratio = (ssd.summary["ex_checkpoint_time"]
                 / pm.summary["ex_checkpoint_time"])
        print(f"  {name}: SSD/PMEM ex-checkpoint ratio {ratio:8.1f}x "
              f"(floor 100x)")

    print(f"\n== energy, normalized to host PM ==")
    for name in ("rm1", "rm2", "rm3", "rm4"):
        reports = compare_energy(builtin_config(name), n_batches=BATCHES,
                                 seed=SEED)
        row = "  ".join(f"{r.policy}={r.normalized:.3f}" for r in reports)
        print(f"  {name}: {row}")

    print(f"\n== utilization demo (hand-checkable trace) ==")
    dcfg, dprof, dopts = utilization_demo()
    for policy in (Policy.CXL_D, Policy.CXL_B, Policy.CXL):
        r = run_policy(policy, dcfg, dprof, dopts, n_batches=4, seed=SEED)
        b0 = r.timeline.batch_bounds[0]
        print(f"  {policy.value:6s} batch0 span {(b0[1] - b0[0]) * 1e3:.4f} ms"
              f"  max_staleness={r.summary['max_staleness']}")
    loose = dataclasses.replace(dopts, staleness_bound=2)
    r = run_policy(Policy.CXL, dcfg, dprof, loose, n_batches=6, seed=SEED)
    print(f"  CXL with staleness bound 2: max={r.summary['max_staleness']}")


if __name__ == "__main__":
    main()
