"""Command-line front door: run, batch, validate, compare, check-inputs."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from . import batch as batch_mod
from . import reporting
from .common import InputError
from .engine import verify_replay
from .io import load_inputs, load_settings
from .policy import PolicyError, load_policy


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--settings", required=True, help="settings YAML path")
    p.add_argument("--out", default=None, help="output directory "
                   "(defaults to the settings' output_dir)")


def _out_dir(args, settings) -> Path:
    out = Path(args.out) if args.out else (settings.base_dir
                                           / settings.output_dir)
    os.makedirs(out, exist_ok=True)
    return out


def _seeds(args, n_runs: int, settings) -> list[int]:
    if getattr(args, "seeds", None):
        seeds = [int(s) for s in args.seeds.split(",")]
        if len(seeds) != n_runs:
            raise InputError(f"--seeds lists {len(seeds)} seeds for "
                             f"{n_runs} runs")
        return seeds
    return settings.seed_list(n_runs)


def cmd_run(args) -> int:
    settings = load_settings(args.settings)
    if args.unplaced:
        from dataclasses import replace
        settings = replace(settings, unplaced_mode=args.unplaced)
    policy = load_policy(args.policy) if args.policy else None
    inputs = load_inputs(settings, policy=policy)
    seed = args.seed if args.seed is not None else settings.seed
    output = batch_mod.run_once(inputs, seed,
                                collect_trace=args.trace or settings.write_trace)
    stats = reporting.stats_from_output(output)
    out = _out_dir(args, settings)
    reporting.write_transplants_csv(out / "transplants.csv", output.transplants)
    reporting.write_final_states_csv(out / "final_states.csv", output)
    reporting.write_stats_csv(out / "stats.csv", stats)
    if args.trace or settings.write_trace:
        reporting.write_trace_csv(out / "offer_trace.csv", output.offer_traces)
    problems = verify_replay(output)
    if problems:
        print("replay check failed: " + "; ".join(problems), file=sys.stderr)
        return 1
    print(f"run complete: {int(stats['transplants.total'])} transplantations, "
          f"{int(stats['kidneys.discarded'])} kidneys discarded -> {out}")
    return 0


def cmd_batch(args) -> int:
    settings = load_settings(args.settings)
    policy = load_policy(args.policy) if args.policy else None
    inputs = load_inputs(settings, policy=policy)
    seeds = _seeds(args, args.runs, settings)
    result = batch_mod.run_batch(inputs, seeds, workers=args.workers,
                                 out_dir=_out_dir(args, settings),
                                 write_runs=args.write_runs)
    table = result.summary()
    out = _out_dir(args, settings)
    reporting.write_summary_csv(out / "summary.csv", table)
    with open(out / "summary.txt", "w", encoding="utf-8") as fh:
        fh.write(reporting.render_summary_text(table))
    print(f"batch of {len(seeds)} runs complete -> {out}")
    return 0


def _load_actual(path: str) -> dict[str, float]:
    actual = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            actual[row["statistic"]] = float(row["value"])
    return actual


def cmd_validate(args) -> int:
    settings = load_settings(args.settings)
    inputs = load_inputs(settings)
    seeds = _seeds(args, args.runs, settings)
    result = batch_mod.run_batch(inputs, seeds, workers=args.workers)
    table = result.summary(actual=_load_actual(args.actual))
    out = _out_dir(args, settings)
    reporting.write_summary_csv(out / "validation.csv", table)
    text = reporting.render_summary_text(table)
    with open(out / "validation.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    miscalibrated = [r.name for r in table.rows if r.calibrated is False]
    print(text)
    print(f"{len(miscalibrated)} statistic(s) outside the 95%-IQR")
    return 0


def cmd_compare(args) -> int:
    settings = load_settings(args.settings)
    inputs = load_inputs(settings)
    policy_a = load_policy(args.policy_a)
    policy_b = load_policy(args.policy_b)
    seeds = _seeds(args, args.runs, settings)
    # common random numbers: both policies see the same seed per run index
    base = batch_mod.run_batch(inputs.with_policy(policy_a), seeds,
                               workers=args.workers)
    variant = batch_mod.run_batch(inputs.with_policy(policy_b), seeds,
                                  workers=args.workers)
    rows = reporting.compare_policies(base.per_run_stats,
                                      variant.per_run_stats,
                                      paired=not args.unpaired)
    out = _out_dir(args, settings)
    reporting.write_delta_csv(out / "compare.csv", rows)
    text = reporting.render_delta_text(rows)
    with open(out / "compare.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text)
    return 0


def cmd_check_inputs(args) -> int:
    settings = load_settings(args.settings)
    inputs = load_inputs(settings)
    problems: list[str] = []
    for cand_id, updates in inputs.updates.items():
        terminal = [u for u in updates
                    if u.kind == "URG" and u.payload.strip() in ("R", "D")]
        if not terminal:
            problems.append(f"candidate {cand_id}: status stream does not "
                            "end in a removal or death")
    known = {r.id for r in inputs.registrations}
    for cand_id in inputs.updates:
        if cand_id not in known:
            problems.append(f"status updates reference unknown candidate "
                            f"{cand_id!r}")
    for reg in inputs.registrations:
        if reg.id not in inputs.updates:
            problems.append(f"candidate {reg.id}: no status updates")
    if problems:
        for p in problems[:50]:
            print(p, file=sys.stderr)
        print(f"{len(problems)} problem(s) found", file=sys.stderr)
        return 1
    print(f"inputs ok: {len(inputs.registrations)} registrations, "
          f"{len(inputs.donors)} donors, {len(inputs.balance_events)} "
          f"balance events, panel of {len(inputs.panel)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etkasim",
        description="Discrete-event simulator for the ETKAS and ESP "
                    "deceased-donor kidney allocation programs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="single simulation run")
    _add_common(p)
    p.add_argument("--policy", help="policy YAML overriding the settings'")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace", action="store_true",
                   help="write the full offer trace")
    p.add_argument("--unplaced", choices=("discard", "force"), default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("batch", help="repeated runs with summary statistics")
    _add_common(p)
    p.add_argument("--policy")
    p.add_argument("--runs", type=int, required=True)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--write-runs", action="store_true",
                   help="write per-run output files")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("validate",
                       help="batch plus comparison against actual statistics")
    _add_common(p)
    p.add_argument("--runs", type=int, required=True)
    p.add_argument("--seeds")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--actual", required=True,
                   help="CSV of statistic,value to calibrate against")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare",
                       help="two policies under common random numbers")
    _add_common(p)
    p.add_argument("--policy-a", required=True)
    p.add_argument("--policy-b", required=True)
    p.add_argument("--runs", type=int, required=True)
    p.add_argument("--seeds")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--unpaired", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check-inputs", help="validate input streams only")
    p.add_argument("--settings", required=True)
    p.set_defaults(func=cmd_check_inputs)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
