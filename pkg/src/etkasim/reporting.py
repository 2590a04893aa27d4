"""Run statistics, multi-run summaries with 95% interquantile ranges, and
policy comparisons with paired t-tests under common random numbers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .engine import SimulationOutput, TransplantRecord

VPRA_BANDS = (("zero", 0.0, 0.0), ("low", 0.0, 0.849), ("mid", 0.85, 0.949),
              ("high", 0.95, 1.0))


def vpra_band(vpra: float) -> str:
    """Sensitization bands: 0, >0-84.9, 85-94.9, 95+ (percent)."""
    if vpra <= 0.0:
        return "zero"
    if vpra < 0.85:
        return "low"
    if vpra < 0.95:
        return "mid"
    return "high"


def match_quality_level(mm_b: int, mm_dr: int, mm_total: int) -> int:
    """Four-level HLA match quality grouping.

    1: 0 ABDR mismatches; 2: at most 1 B/DR mismatch; 3: 2B or 1B+1DR;
    4: 2 DR or 3+ B/DR mismatches.
    """
    if mm_total == 0:
        return 1
    bdr = mm_b + mm_dr
    if bdr <= 1:
        return 2
    if mm_dr == 2 or bdr >= 3:
        return 4
    return 3


def age_diff_band(cand_age: int, donor_age: int) -> str:
    diff = cand_age - donor_age
    if diff >= 35:
        return "cand_35p_older"
    if diff >= 15:
        return "cand_15_34_older"
    if diff >= 6:
        return "cand_6_14_older"
    if diff >= -5:
        return "within_5"
    if diff >= -14:
        return "cand_6_14_younger"
    if diff >= -34:
        return "cand_15_34_younger"
    return "cand_35p_younger"


def homozygosity_class(homo_b: bool, homo_dr: bool) -> str:
    if homo_b and homo_dr:
        return "b_and_dr"
    if homo_dr:
        return "dr"
    if homo_b:
        return "b"
    return "none"


def stats_from_output(output: SimulationOutput) -> dict[str, float]:
    """Flat named statistics for one run; every grouping reconciles with the
    transplant total."""
    s: dict[str, float] = {}

    def bump(key: str, amount: float = 1.0) -> None:
        s[key] = s.get(key, 0.0) + amount

    s["transplants.total"] = 0
    for program in ("etkas", "esp"):
        s[f"transplants.{program}"] = 0
    s["transplants.single"] = 0
    s["transplants.dual"] = 0

    for rec in output.transplants:
        program = rec.program.lower()
        bump("transplants.total")
        bump(f"transplants.{program}")
        bump("transplants.dual" if rec.dual else "transplants.single")
        bump(f"{program}.mech.{rec.mechanism}")
        bump(f"{program}.mm.{min(rec.mm_total, 6)}")
        bump(f"{program}.quality.level{match_quality_level(rec.mm_b, rec.mm_dr, rec.mm_total)}")
        bump(f"{program}.vpra.{vpra_band(rec.vpra)}")
        bump(f"{program}.geo.{rec.geography}")
        bump(f"{program}.agediff.{age_diff_band(rec.cand_age, rec.donor_age)}")
        bump(f"{program}.homozygosity.{homozygosity_class(rec.homo_b, rec.homo_dr)}")
        bump(f"country.{rec.cand_country}.transplants")
        if rec.cand_age < 18:
            bump(f"{program}.age.pediatric")
        if rec.cand_age >= 65:
            bump(f"{program}.age.65plus")
        else:
            bump(f"{program}.age.under65")
        bump(f"{program}.repeat" if rec.prior_transplant else f"{program}.primary")

    for key, value in output.counters.items():
        s[key] = float(value)
    return s


@dataclass
class SummaryRow:
    name: str
    mean: float
    lo: float   # 2.5th percentile
    hi: float   # 97.5th percentile
    actual: float | None = None

    @property
    def calibrated(self) -> bool | None:
        if self.actual is None:
            return None
        return self.lo <= self.actual <= self.hi


@dataclass
class SummaryTable:
    rows: list[SummaryRow]

    def row(self, name: str) -> SummaryRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def percentile_bounds(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return (float(np.percentile(arr, 2.5, method="linear")),
            float(np.percentile(arr, 97.5, method="linear")))


def summarize(per_run_stats: Sequence[Mapping[str, float]],
              actual: Mapping[str, float] | None = None) -> SummaryTable:
    """Per-statistic mean and 95%-IQR (2.5th / 97.5th percentile) across
    runs, with a calibration column when actual values are supplied."""
    if not per_run_stats:
        raise ValueError("need at least one run")
    names: list[str] = []
    for run in per_run_stats:
        for name in run:
            if name not in names:
                names.append(name)
    rows = []
    for name in names:
        values = [float(run.get(name, 0.0)) for run in per_run_stats]
        lo, hi = percentile_bounds(values)
        rows.append(SummaryRow(
            name=name, mean=float(np.mean(values)), lo=lo, hi=hi,
            actual=(float(actual[name]) if actual and name in actual else None)))
    return SummaryTable(rows)


@dataclass
class DeltaRow:
    name: str
    baseline_mean: float
    variant_mean: float
    delta: float
    t_stat: float | None
    p_value: float | None
    stars: str

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < 0.05


def _stars(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def compare_policies(baseline: Sequence[Mapping[str, float]],
                     variant: Sequence[Mapping[str, float]],
                     paired: bool = True) -> list[DeltaRow]:
    """Mean differences per statistic with t-test significance.

    Paired mode requires equal run counts (common random numbers pair run i
    with run i); unpaired mode falls back to Welch's test.
    """
    if paired and len(baseline) != len(variant):
        raise ValueError("paired comparison needs equal run counts, got "
                         f"{len(baseline)} and {len(variant)}")
    names: list[str] = []
    for run in (*baseline, *variant):
        for name in run:
            if name not in names:
                names.append(name)
    rows = []
    for name in names:
        base = np.array([float(r.get(name, 0.0)) for r in baseline])
        var = np.array([float(r.get(name, 0.0)) for r in variant])
        delta = float(var.mean() - base.mean())
        t_stat = p_value = None
        if paired:
            diffs = var - base
            sd = diffs.std(ddof=1) if len(diffs) > 1 else 0.0
            if sd > 0:
                t_stat = float(diffs.mean() / (sd / math.sqrt(len(diffs))))
                p_value = float(2.0 * sps.t.sf(abs(t_stat), df=len(diffs) - 1))
            elif np.allclose(diffs, 0.0):
                t_stat, p_value = 0.0, 1.0
        else:
            if len(base) > 1 and len(var) > 1 and (base.std() > 0 or var.std() > 0):
                res = sps.ttest_ind(var, base, equal_var=False)
                t_stat, p_value = float(res.statistic), float(res.pvalue)
        rows.append(DeltaRow(name=name, baseline_mean=float(base.mean()),
                             variant_mean=float(var.mean()), delta=delta,
                             t_stat=t_stat, p_value=p_value,
                             stars=_stars(p_value)))
    return rows


def reconciliation_problems(stats: Mapping[str, float]) -> list[str]:
    """Cross-checks between groupings and the transplant totals."""
    problems = []
    total = stats.get("transplants.total", 0.0)
    country_sum = sum(v for k, v in stats.items()
                      if k.startswith("country.") and k.endswith(".transplants"))
    if country_sum != total:
        problems.append(f"country rows sum to {country_sum}, total {total}")
    program_sum = (stats.get("transplants.etkas", 0.0)
                   + stats.get("transplants.esp", 0.0))
    if program_sum != total:
        problems.append(f"program rows sum to {program_sum}, total {total}")
    for program in ("etkas", "esp"):
        geo = sum(v for k, v in stats.items()
                  if k.startswith(f"{program}.geo."))
        if geo != stats.get(f"transplants.{program}", 0.0):
            problems.append(f"{program} geography rows sum to {geo}")
    return problems


# ---------------------------------------------------------------------------
# Match-list export in the published example-table layout

def write_match_list_csv(path: Path, match_list) -> None:
    """Dump an ordered match list: the ETKAS layout carries the tier, match
    quality, dialysis years, rank, total, and the point components; the ESP
    layout reduces to geography and dialysis days."""
    from .common import round_half_up
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if match_list.program == "ETKAS":
            w.writerow(["rank", "candidate_id", "tier", "match_quality",
                        "dialysis_years", "total", "dialysis", "hla",
                        "pediatric", "hu", "balance", "distance", "mmp",
                        "geography", "filtered"])
            for rank, r in enumerate(match_list.records, start=1):
                comp = r.points.rounded()
                quality = f"{r.mm.mm_a}{r.mm.mm_b}{r.mm.mm_dr}"
                tier = "0MM" if r.tier[0] == 3 else (
                    "PED" if r.tier[0] == 2 else ">0MM")
                w.writerow([rank, r.candidate_id, tier, quality,
                            f"{r.dialysis_days / 365.25:.1f}",
                            r.points.display_total, comp["dialysis"],
                            comp["hla"], comp["pediatric"], comp["hu"],
                            comp["balance"], comp["distance"], comp["mmp"],
                            r.geography, int(r.filtered_visible)])
        else:
            w.writerow(["rank", "candidate_id", "dialysis_days", "points",
                        "geography", "filtered"])
            for rank, r in enumerate(match_list.records, start=1):
                w.writerow([rank, r.candidate_id, r.dialysis_days,
                            round_half_up(r.total), r.geography,
                            int(r.filtered_visible)])


# ---------------------------------------------------------------------------
# File output

def _fmt(value: float) -> str:
    if value is None:
        return ""
    if float(value).is_integer():
        return str(int(value))
    return f"{value:.6f}"


def write_transplants_csv(path: Path, records: Sequence[TransplantRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["donor_id", "candidate_id", "date", "program", "mechanism",
                    "forced", "dual", "kidneys", "rank", "mm_a", "mm_b",
                    "mm_dr", "geography", "total_points", "dialysis_points",
                    "hla_points", "pediatric_points", "hu_points",
                    "mmp_points", "balance_points", "distance_points",
                    "cand_country", "donor_country", "cand_age", "donor_age",
                    "dialysis_days", "vpra", "prior_tx"])
        for r in records:
            w.writerow([
                r.donor_id, r.candidate_id, r.when.isoformat(), r.program,
                r.mechanism, int(r.forced), int(r.dual), r.kidneys, r.rank,
                r.mm_a, r.mm_b, r.mm_dr, r.geography,
                f"{r.total_points:.4f}",
                *(f"{r.comp[c]:.4f}" for c in
                  ("dialysis", "hla", "pediatric", "hu", "mmp", "balance",
                   "distance")),
                r.cand_country, r.donor_country, r.cand_age, r.donor_age,
                r.dialysis_days, f"{r.vpra:.6f}", int(r.prior_transplant)])


def write_final_states_csv(path: Path, output: SimulationOutput) -> None:
    from .common import from_days
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate_id", "status", "status_date"])
        for cand_id, status, day in output.final_states:
            w.writerow([cand_id, status, from_days(day).isoformat()])


def write_stats_csv(path: Path, stats: Mapping[str, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "value"])
        for name in sorted(stats):
            w.writerow([name, _fmt(stats[name])])


def write_trace_csv(path: Path, traces: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["donor_id", "candidate_id", "center", "stage", "decision",
                    "probability"])
        for donor_id, cand_id, center, stage, decision, prob in traces:
            w.writerow([donor_id, cand_id, center, stage, decision,
                        "" if prob is None else f"{prob:.6f}"])


def write_summary_csv(path: Path, table: SummaryTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "mean", "p2.5", "p97.5", "actual",
                    "calibrated"])
        for r in table.rows:
            w.writerow([r.name, _fmt(r.mean), _fmt(r.lo), _fmt(r.hi),
                        "" if r.actual is None else _fmt(r.actual),
                        "" if r.calibrated is None else
                        ("yes" if r.calibrated else "NO")])


def render_summary_text(table: SummaryTable) -> str:
    lines = [f"{'statistic':<44} {'mean':>10} {'95%-IQR':>23} {'actual':>10}"]
    for r in table.rows:
        band = f"[{_fmt(r.lo)}, {_fmt(r.hi)}]"
        actual = "" if r.actual is None else _fmt(r.actual)
        flag = ""
        if r.calibrated is False:
            flag = "  *off*"
        lines.append(f"{r.name:<44} {_fmt(r.mean):>10} {band:>23} "
                     f"{actual:>10}{flag}")
    return "\n".join(lines) + "\n"


def write_delta_csv(path: Path, rows: Sequence[DeltaRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "baseline_mean", "variant_mean", "delta",
                    "t", "p", "stars"])
        for r in rows:
            w.writerow([r.name, _fmt(r.baseline_mean), _fmt(r.variant_mean),
                        _fmt(r.delta),
                        "" if r.t_stat is None else f"{r.t_stat:.4f}",
                        "" if r.p_value is None else f"{r.p_value:.6g}",
                        r.stars])


def render_delta_text(rows: Sequence[DeltaRow]) -> str:
    lines = [f"{'statistic':<44} {'baseline':>10} {'variant':>10} "
             f"{'delta':>10} {'p':>10}"]
    for r in rows:
        p = "" if r.p_value is None else f"{r.p_value:.4g}"
        lines.append(f"{r.name:<44} {_fmt(r.baseline_mean):>10} "
                     f"{_fmt(r.variant_mean):>10} {_fmt(r.delta):>10} "
                     f"{p:>10} {r.stars}")
    return "\n".join(lines) + "\n"
