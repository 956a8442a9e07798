"""Functional emulator and discrete-event simulator of recommendation-model
training on disaggregated persistent memory, with crash-consistent
checkpointing."""

__version__ = "0.1.0"

from .report import compare_energy, dram_ideal_run, energy_of
from .sim import (Policy, ProfileSet, SimError, SimInvariantError, SimOptions,
                  SimResult, breakdown, default_profiles, resume_training,
                  run_policy)
from .workload import ModelConfig, builtin_config

__all__ = [
    "ModelConfig", "Policy", "ProfileSet", "SimError", "SimInvariantError",
    "SimOptions", "SimResult", "breakdown", "builtin_config",
    "compare_energy", "default_profiles", "dram_ideal_run", "energy_of",
    "resume_training", "run_policy", "__version__",
]
