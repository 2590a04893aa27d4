"""Single-run and multi-run drivers.

Batch runs are embarrassingly parallel: each run gets its own seed and an
independent random stream, inputs are shared read-only (workers inherit
them via fork), and results are keyed by run index so the output does not
depend on worker scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import reporting
from .engine import SimulationOutput, initialize, run
from .io import SimulationInputs, load_registrations, load_status_updates


def run_once(inputs: SimulationInputs, seed: int,
             collect_trace: bool = False,
             check_invariants: bool = False) -> SimulationOutput:
    state = initialize(inputs, seed, check_invariants=check_invariants,
                       collect_trace=collect_trace)
    return run(state)


def _inputs_for_run(inputs: SimulationInputs, run_index: int) -> SimulationInputs:
    """Rotate through alternate candidate streams when the settings supply
    them (one imputed trajectory file per run)."""
    streams = inputs.candidate_stream_paths
    if not streams:
        return inputs
    cand_path = streams[run_index % len(streams)]
    status_streams = inputs.status_stream_paths
    from dataclasses import replace
    new = replace(inputs,
                  registrations=load_registrations(cand_path,
                                                   inputs.antigen_table))
    if status_streams:
        status_path = status_streams[run_index % len(status_streams)]
        new = replace(new, updates=load_status_updates(status_path))
    return new


_FORK_INPUTS: SimulationInputs | None = None


def _worker(args: tuple[int, int]) -> tuple[int, dict[str, float]]:
    run_index, seed = args
    inputs = _inputs_for_run(_FORK_INPUTS, run_index)
    output = run_once(inputs, seed)
    return run_index, reporting.stats_from_output(output)


@dataclass
class BatchResult:
    seeds: list[int]
    per_run_stats: list[dict[str, float]]

    def summary(self, actual=None) -> reporting.SummaryTable:
        return reporting.summarize(self.per_run_stats, actual=actual)


def run_batch(inputs: SimulationInputs, seeds: Sequence[int],
              workers: int = 1,
              out_dir: Path | None = None,
              write_runs: bool = False) -> BatchResult:
    """Run one simulation per seed; aggregate per-run statistics.

    Identical seed lists produce identical results regardless of worker
    count.  With ``write_runs`` each run's transplant records and statistics
    land under ``out_dir/run_<index>/``.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    stats_by_index: dict[int, dict[str, float]] = {}

    if workers <= 1 or len(seeds) == 1:
        for i, seed in enumerate(seeds):
            run_inputs = _inputs_for_run(inputs, i)
            output = run_once(run_inputs, seed)
            stats_by_index[i] = reporting.stats_from_output(output)
            if write_runs and out_dir is not None:
                _write_run(out_dir, i, output, stats_by_index[i])
    else:
        global _FORK_INPUTS
        _FORK_INPUTS = inputs
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for run_index, stats in pool.map(
                        _worker, list(enumerate(seeds)),
                        chunksize=max(1, len(seeds) // (workers * 4))):
                    stats_by_index[run_index] = stats
        finally:
            _FORK_INPUTS = None
        if write_runs and out_dir is not None:
            # re-run writes serially; parallel batch keeps only statistics
            for i, seed in enumerate(seeds):
                output = run_once(_inputs_for_run(inputs, i), seed)
                _write_run(out_dir, i, output, stats_by_index[i])

    per_run = [stats_by_index[i] for i in range(len(seeds))]
    return BatchResult(seeds=list(seeds), per_run_stats=per_run)


def _write_run(out_dir: Path, index: int, output: SimulationOutput,
               stats: dict[str, float]) -> None:
    run_dir = Path(out_dir) / f"run_{index:03d}"
    os.makedirs(run_dir, exist_ok=True)
    reporting.write_transplants_csv(run_dir / "transplants.csv",
                                    output.transplants)
    reporting.write_final_states_csv(run_dir / "final_states.csv", output)
    reporting.write_stats_csv(run_dir / "stats.csv", stats)
    if output.offer_traces:
        reporting.write_trace_csv(run_dir / "offer_trace.csv",
                                  output.offer_traces)
