"""Command-line front end.

Subcommands:

* ``run``         one policy, one model; writes the event timeline,
                  critical-path breakdown, and a JSON summary
* ``sweep``       several policies in parallel worker processes with a
                  deterministic merge
* ``compare``     energy table for flash / host-PM / DRAM-reference /
                  relaxed-device configurations, normalized to host PM
* ``crash-test``  enumerate or sample power-cut points in a functional
                  run's journal and require bit-exact resume

Configuration layering, later wins: named model defaults, a JSON config
file (sections ``model``, ``options``, ``cost``), then ``--set``
dotted overrides such as ``--set options.reuse_rate=0.5``.

Exit codes: 0 success, 2 bad configuration, 3 violated invariant.
Output files land in ``--outdir``, else ``$TRAINSIM_OUTDIR``, else the
working directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .engine import states_equal
from .report import compare_energy, energy_csv
from .scenarios import toy_config, utilization_demo
from .sim import (Policy, ProfileSet, SimError, SimInvariantError, SimOptions,
                  SimResult, breakdown_csv, default_profiles, resume_training,
                  run_policy, timeline_csv)
from .store import StoreError, recover
from .workload import ModelConfig, WorkloadError, builtin_config

CRASH_POLICIES = (Policy.CXL_B, Policy.CXL)


class ConfigError(Exception):
    pass


# --- configuration layering -------------------------------------------------

def _named_setup(name: str) -> tuple[ModelConfig, ProfileSet, SimOptions]:
    if name == "toy":
        return toy_config(), default_profiles(), SimOptions()
    if name == "demo":
        return utilization_demo()
    try:
        return builtin_config(name), default_profiles(), SimOptions()
    except WorkloadError as exc:
        raise ConfigError(f"unknown model {name!r}; choose rm1..rm4, "
                          f"toy, or demo") from exc


def _coerce(value):
    return tuple(value) if isinstance(value, list) else value


def _update(obj, updates: dict, what: str):
    try:
        return dataclasses.replace(
            obj, **{k: _coerce(v) for k, v in updates.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {what} setting: {exc}") from exc


def _load_config_file(path: str) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - {"model", "options", "cost"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _parse_sets(items: list[str]) -> dict:
    sections: dict[str, dict] = {"model": {}, "options": {}, "cost": {}}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set needs section.field=value, got {item!r}")
        path, raw = item.split("=", 1)
        section, dot, field_name = path.partition(".")
        if not dot or section not in sections or not field_name:
            raise ConfigError(f"--set path must be model.*, options.*, "
                              f"or cost.*, got {path!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        sections[section][field_name] = value
    return sections


def resolve_setup(args) -> tuple[ModelConfig, ProfileSet, SimOptions]:
    cfg, profiles, options = _named_setup(args.model)
    layers = []
    if getattr(args, "config", None):
        layers.append(_load_config_file(args.config))
    layers.append(_parse_sets(getattr(args, "set", None) or []))
    for doc in layers:
        if doc.get("model"):
            try:
                cfg = _update(cfg, doc["model"], "model")
            except WorkloadError as exc:
                raise ConfigError(str(exc)) from exc
        if doc.get("options"):
            options = _update(options, doc["options"], "options")
        if doc.get("cost"):
            profiles = dataclasses.replace(
                profiles, cost=_update(profiles.cost, doc["cost"], "cost"))
    return cfg, profiles, options


def _outdir(args) -> Path:
    path = Path(args.outdir or os.environ.get("TRAINSIM_OUTDIR") or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_policy(name: str) -> Policy:
    try:
        return Policy(name)
    except ValueError as exc:
        raise ConfigError(
            f"unknown policy {name!r}; choose from "
            f"{', '.join(p.value for p in Policy)}") from exc


# --- subcommands ------------------------------------------------------------

def cmd_run(args) -> int:
    cfg, profiles, options = resolve_setup(args)
    policy = _parse_policy(args.policy)
    result = run_policy(policy, cfg, profiles, options,
                        n_batches=args.batches, seed=args.seed)
    out = _outdir(args)
    timeline_csv(result, out / f"timeline_{policy.value}.csv")
    breakdown_csv([result], out / "breakdown.csv")
    _write_json(out / "summary.json", result.summary)
    s = result.summary
    print(f"{policy.value} {cfg.name}: {s['total_time'] * 1e3:.3f} ms "
          f"({s['per_batch_time'] * 1e6:.1f} us/batch), "
          f"raw_hits={s['raw_hits']}, max_staleness={s['max_staleness']}")
    return 0


def _sweep_worker(payload) -> SimResult:
    policy, cfg, profiles, options, n_batches, seed = payload
    return run_policy(policy, cfg, profiles, options,
                      n_batches=n_batches, seed=seed)


def cmd_sweep(args) -> int:
    cfg, profiles, options = resolve_setup(args)
    policies = [_parse_policy(p.strip())
                for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise ConfigError("no policies given")
    payloads = [(p, cfg, profiles, options, args.batches, args.seed)
                for p in policies]
    workers = args.workers or min(len(policies), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map preserves submission order, so the merge is stable no
            # matter which worker finishes first
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]
    out = _outdir(args)
    for r in results:
        timeline_csv(r, out / f"timeline_{r.policy.value}.csv")
    breakdown_csv(results, out / "breakdown.csv")
    _write_json(out / "summary.json", {"runs": [r.summary for r in results]})
    for r in results:
        s = r.summary
        print(f"{r.policy.value:6s} {s['total_time'] * 1e3:10.3f} ms "
              f"ex_ckpt={s['ex_checkpoint_time'] * 1e3:9.3f} ms "
              f"raw_hits={s['raw_hits']}")
    return 0


def cmd_compare(args) -> int:
    cfg, profiles, options = resolve_setup(args)
    reports = compare_energy(cfg, profiles, options,
                             n_batches=args.batches, seed=args.seed)
    out = _outdir(args)
    energy_csv(reports, out / "energy.csv")
    _write_json(out / "summary.json",
                {"energy": [dataclasses.asdict(r) for r in reports]})
    for r in reports:
        print(f"{r.policy:5s} {r.total_j * 1e3:10.4f} mJ "
              f"(x{r.normalized:.3f} of PMEM)")
    return 0


def cmd_crash_test(args) -> int:
    cfg, profiles, options = resolve_setup(args)
    policy = _parse_policy(args.policy)
    if policy not in CRASH_POLICIES:
        raise ConfigError(
            "crash-test covers the undo-logging device policies: "
            + ", ".join(p.value for p in CRASH_POLICIES))
    options = dataclasses.replace(options, functional=True,
                                  retain_history=True)
    full = run_policy(policy, cfg, profiles, options,
                      n_batches=args.batches, seed=args.seed)
    store = full.store
    n_events = len(store.journal)
    every = list(range(n_events + 1))
    if args.mode == "exhaustive":
        if n_events + 1 > args.max_points:
            raise ConfigError(
                f"journal has {n_events} events "
                f"(> --max-points {args.max_points}); use --mode sampled")
        points = every
    else:
        rng = np.random.default_rng([args.seed, 0xC4A5])
        k = min(args.samples, len(every))
        points = sorted(rng.choice(len(every), size=k, replace=False))
    failures = []
    for idx in points:
        rec = recover(store.crash(int(idx)))
        resumed = resume_training(cfg, rec, args.batches, args.seed, options)
        if not states_equal(resumed, full.state):
            failures.append(int(idx))
    out = _outdir(args)
    _write_json(out / "summary.json", {
        "policy": policy.value, "model": cfg.name,
        "batches": args.batches, "journal_events": n_events,
        "points_tested": len(points), "mode": args.mode,
        "failures": failures,
    })
    if failures:
        raise SimInvariantError(
            "crash-recovery-bit-exactness",
            f"{len(failures)}/{len(points)} crash points diverged "
            f"(first at journal index {failures[0]})")
    print(f"crash-test PASS: {policy.value} {cfg.name}, "
          f"{len(points)} of {n_events + 1} cut points, all bit-exact")
    return 0


# --- parser -----------------------------------------------------------------

def _common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--model", default="rm1",
                     help="rm1..rm4, toy, or demo (default rm1)")
    sub.add_argument("--config", help="JSON file with model/options/cost sections")
    sub.add_argument("--set", action="append", metavar="SEC.FIELD=VALUE",
                     help="override one field, e.g. options.reuse_rate=0.5")
    sub.add_argument("--batches", type=int, default=8)
    sub.add_argument("--seed", type=int, default=42)
    sub.add_argument("--outdir", help="defaults to $TRAINSIM_OUTDIR or .")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainsim",
        description="storage-policy simulator for embedding-table training")
    parser.add_argument("--version", action="version",
                        version=f"trainsim {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    run_p = subs.add_parser("run", help="simulate one policy")
    _common(run_p)
    run_p.add_argument("--policy", default="CXL",
                       help=", ".join(p.value for p in Policy))
    run_p.set_defaults(fn=cmd_run)

    sweep_p = subs.add_parser("sweep", help="simulate several policies")
    _common(sweep_p)
    sweep_p.add_argument("--policies",
                         default=",".join(p.value for p in Policy))
    sweep_p.add_argument("--workers", type=int, default=0,
                         help="0 = one per policy, capped at CPU count")
    sweep_p.set_defaults(fn=cmd_sweep)

    cmp_p = subs.add_parser("compare", help="energy comparison table")
    _common(cmp_p)
    cmp_p.set_defaults(fn=cmd_compare)

    crash_p = subs.add_parser("crash-test",
                              help="power-cut enumeration on a functional run")
    _common(crash_p)
    crash_p.set_defaults(model="toy")
    crash_p.add_argument("--policy", default="CXL_B",
                         help=" or ".join(p.value for p in CRASH_POLICIES))
    crash_p.add_argument("--mode", choices=("exhaustive", "sampled"),
                         default="exhaustive")
    crash_p.add_argument("--samples", type=int, default=64,
                         help="cut points tried in sampled mode")
    crash_p.add_argument("--max-points", type=int, default=5000,
                         help="refuse exhaustive runs larger than this")
    crash_p.set_defaults(fn=cmd_crash_test)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (WorkloadError, StoreError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SimInvariantError as exc:
        print(f"invariant violation [{exc.invariant}]: {exc}", file=sys.stderr)
        return 3
    except SimError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
