"""Energy accounting and cross-policy comparisons.

Energy splits into a dynamic part, charged per byte actually moved on
the persistence medium, and a static part, the device's standing power
over the simulated wall time.  The DRAM reference point reruns the host
flow with checkpointing off on volatile parts; batteries-and-capacitors
setups keep several modules powered, so its standing power carries a
module multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .devices import DeviceProfile
from .sim import (Policy, ProfileSet, SimOptions, SimResult,
                  default_profiles, run_policy)
from .workload import ModelConfig

DRAM_IDEAL = "DRAM"
DRAM_MODULE_MULTIPLIER = 4.0


@dataclass
class EnergyReport:
    policy: str
    model: str
    device: str
    dynamic_j: float
    static_j: float
    total_j: float
    normalized: float = float("nan")


def energy_of(result: SimResult, profile: DeviceProfile,
              static_multiplier: float = 1.0,
              label: str | None = None) -> EnergyReport:
    s = result.summary
    dyn = (s["media_read_bytes"] * profile.energy_read
           + s["media_write_bytes"] * profile.energy_write)
    stat = profile.energy_static * static_multiplier * s["total_time"]
    return EnergyReport(policy=label or s["policy"], model=s["model"],
                        device=profile.name, dynamic_j=dyn, static_j=stat,
                        total_j=dyn + stat)


def dram_ideal_run(cfg: ModelConfig, profiles: ProfileSet,
                   options: SimOptions | None = None, *,
                   n_batches: int = 8, seed: int = 42
                   ) -> tuple[SimResult, EnergyReport]:
    """Host flow on plain DRAM with no persistence work at all."""
    opts = options if options is not None else SimOptions()
    opts = replace(opts, media_override=profiles.dram,
                   checkpoint_enabled=False)
    result = run_policy(Policy.PMEM, cfg, profiles, opts,
                        n_batches=n_batches, seed=seed)
    report = energy_of(result, profiles.dram,
                       static_multiplier=DRAM_MODULE_MULTIPLIER,
                       label=DRAM_IDEAL)
    return result, report


def compare_energy(cfg: ModelConfig, profiles: ProfileSet | None = None,
                   options: SimOptions | None = None, *,
                   n_batches: int = 8, seed: int = 42
                   ) -> list[EnergyReport]:
    """Energy for the flash, host-PM, DRAM-reference, and relaxed-device
    configurations, normalized to host PM."""
    profiles = profiles if profiles is not None else default_profiles()
    options = options if options is not None else SimOptions()
    reports = []
    for pol, prof in ((Policy.SSD, profiles.ssd),
                      (Policy.PMEM, profiles.pmem)):
        r = run_policy(pol, cfg, profiles, options,
                       n_batches=n_batches, seed=seed)
        reports.append(energy_of(r, prof))
    _, ideal = dram_ideal_run(cfg, profiles, options,
                              n_batches=n_batches, seed=seed)
    reports.append(ideal)
    r = run_policy(Policy.CXL, cfg, profiles, options,
                   n_batches=n_batches, seed=seed)
    reports.append(energy_of(r, profiles.pmem))
    base = next(rep.total_j for rep in reports if rep.policy == "PMEM")
    for rep in reports:
        rep.normalized = rep.total_j / base
    return reports


def energy_csv(reports: list[EnergyReport], path) -> None:
    with open(path, "w") as f:
        f.write("policy,model,device,dynamic_j,static_j,total_j,normalized\n")
        for r in reports:
            f.write(f"{r.policy},{r.model},{r.device},{r.dynamic_j:.9e},"
                    f"{r.static_j:.9e},{r.total_j:.9e},{r.normalized:.6f}\n")
