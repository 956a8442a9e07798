#!/usr/bin/env python3
"""Produce the full artifact set for every built-in model.

Per model: a six-policy sweep (timelines + breakdown + summaries) and an
energy comparison; plus one exhaustive crash enumeration on the toy
model for each undo-logging policy.  Everything is driven through the
CLI so the artifacts match what a user would get by hand.

    python3 scripts/run_experiments.py [outdir]
"""

import sys
from pathlib import Path

from trainsim.cli import main as cli

MODELS = ("rm1", "rm2", "rm3", "rm4")
BATCHES = "8"


def run(argv):
    rc = cli(argv)
    if rc != 0:
        raise SystemExit(f"step failed ({rc}): {' '.join(argv)}")


def main():
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "experiments")
    for model in MODELS:
        out = root / model
        run(["sweep", "--model", model, "--batches", BATCHES,
             "--outdir", str(out)])
        run(["compare", "--model", model, "--batches", BATCHES,
             "--outdir", str(out / "energy")])
    for policy in ("CXL_B", "CXL"):
        run(["crash-test", "--model", "toy", "--policy", policy,
             "--batches", "3", "--outdir", str(root / f"crash_{policy}")])
    print(f"\nartifacts under {root}/")


if __name__ == "__main__":
    main()
