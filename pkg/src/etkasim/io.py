"""Input loading: settings documents, candidate/donor/balance streams, and
model files.  Paths in a settings file resolve relative to the file itself;
omitted data paths fall back to the packaged defaults under data/."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import date
from importlib import resources
from pathlib import Path

import yaml

from .balances import BalanceEvent, read_balance_events
from .common import InputError, parse_bool, parse_date, read_csv_rows
from .entities import (CandidateRegistration, CenterRegistry, DonorArrival,
                       StatusUpdate, expand_mm_patterns, parse_profile)
from .hla import (AntigenTable, BloodGroupFrequencies, DonorPanel,
                  FrequencyTable, HlaTyping)
from .offering import AcceptanceModels, CoxSampler, LogisticModel
from .policy import PolicyConfig, load_policy
from .posttransplant import RelistCurveSet, RelistingPool, WeibullModel


def data_path(name: str) -> Path:
    return Path(resources.files("etkasim").joinpath("data", name))


@dataclass(frozen=True)
class SimulationSettings:
    window_start: date
    window_end: date
    paths: dict[str, str | list[str]]
    base_dir: Path
    seed: int = 1
    seeds: tuple[int, ...] | None = None  # explicit per-run seed list
    unplaced_mode: str = "discard"
    output_dir: str = "out"
    write_trace: bool = False
    de_novo_immunization_p: float = 0.20

    def seed_list(self, n_runs: int) -> list[int]:
        if self.seeds is not None:
            if len(self.seeds) < n_runs:
                raise InputError(f"settings list {len(self.seeds)} seeds, "
                                 f"{n_runs} runs requested")
            return list(self.seeds[:n_runs])
        return [self.seed + i for i in range(n_runs)]

    def resolve(self, key: str, default_name: str | None = None) -> Path | None:
        value = self.paths.get(key)
        if value is None:
            return data_path(default_name) if default_name else None
        return (self.base_dir / value).resolve()

    def resolve_many(self, key: str) -> list[Path]:
        value = self.paths.get(key)
        if value is None:
            return []
        if isinstance(value, str):
            value = [value]
        return [(self.base_dir / v).resolve() for v in value]


_SETTINGS_KEYS = {"window", "paths", "seed", "seeds", "unplaced_mode",
                  "output_dir", "write_trace", "de_novo_immunization_p"}
_PATH_KEYS = {"candidates", "statuses", "donors", "balances", "panel",
              "antigens", "hla_frequencies", "blood_group_frequencies",
              "centers", "policy", "cox_coefficients", "cox_baselines",
              "accept_etkas_center", "accept_etkas_patient",
              "accept_esp_center", "accept_esp_patient", "dual_model",
              "weibull", "relist_curves", "relist_pool", "relist_pool_updates",
              "candidate_streams", "status_streams"}


def load_settings(path: str | Path) -> SimulationSettings:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    unknown = sorted(set(doc) - _SETTINGS_KEYS)
    if unknown:
        raise InputError(f"unknown settings key(s): {', '.join(unknown)}", path)
    window = doc.get("window", {})
    if "start" not in window or "end" not in window:
        raise InputError("settings must define window.start and window.end", path)

    def as_date(v):
        return v if isinstance(v, date) else parse_date(str(v), path)

    paths = doc.get("paths", {}) or {}
    unknown = sorted(set(paths) - _PATH_KEYS)
    if unknown:
        raise InputError(f"unknown path key(s): {', '.join(unknown)}", path)
    seeds = doc.get("seeds")
    return SimulationSettings(
        window_start=as_date(window["start"]),
        window_end=as_date(window["end"]),
        paths=paths,
        base_dir=path.parent,
        seed=int(doc.get("seed", 1)),
        seeds=tuple(int(s) for s in seeds) if seeds else None,
        unplaced_mode=str(doc.get("unplaced_mode", "discard")),
        output_dir=str(doc.get("output_dir", "out")),
        write_trace=bool(doc.get("write_trace", False)),
        de_novo_immunization_p=float(doc.get("de_novo_immunization_p", 0.20)),
    )


# ---------------------------------------------------------------------------
# Candidate and donor streams

_HLA_COLS = ("a1", "a2", "b1", "b2", "dr1", "dr2")


def _typing_from_row(table: AntigenTable, row: dict[str, str], path, line):
    codes = [row[c].strip() for c in _HLA_COLS if row.get(c, "").strip()]
    if not codes:
        return None
    typing = HlaTyping.from_codes(table, codes)
    typing.validate(table)
    return typing


def load_registrations(path: str | Path,
                       table: AntigenTable) -> list[CandidateRegistration]:
    regs = []
    for line, row in read_csv_rows(path):
        try:
            hla = _typing_from_row(table, row, path, line)
            reg = CandidateRegistration(
                id=row["id"].strip(),
                patient_id=(row.get("patient_id", "").strip() or row["id"].strip()),
                country=row["country"].strip(),
                center=row["center"].strip(),
                blood_group=row["bg"].strip(),
                date_of_birth=parse_date(row["dob"], path, line),
                registration_date=parse_date(row["registration_date"], path, line),
                hla=hla,
                unacceptables=frozenset(row.get("unacceptables", "").split()),
                dialysis_start=(parse_date(row["dialysis_start"], path, line)
                                if row.get("dialysis_start", "").strip() else None),
                prior_transplant=parse_bool(row.get("prior_tx", "0"), path, line),
                previous_transplant_date=(
                    parse_date(row["prev_tx_date"], path, line)
                    if row.get("prev_tx_date", "").strip() else None),
                last_screening_date=(
                    parse_date(row["screening_date"], path, line)
                    if row.get("screening_date", "").strip() else None),
                initial_urgency=(row.get("urgency", "").strip() or "NT"),
                profile=parse_profile(row.get("profile", ""), path, line),
                mm_criteria=expand_mm_patterns(row.get("mm_criteria", "")),
                am_program=parse_bool(row.get("am", "0"), path, line),
                kaoo=parse_bool(row.get("kaoo", "0"), path, line),
                esp_extended_opt_in=parse_bool(row.get("esp_opt_in", "0"),
                                               path, line),
                german_program_choice=(row.get("program_choice", "").strip()
                                       or None),
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"malformed registration: {exc}", path, line)
        regs.append(reg)
    return regs


def load_status_updates(path: str | Path) -> dict[str, list[StatusUpdate]]:
    """Updates per candidate, sorted by date with input order as tie-break."""
    updates: dict[str, list[tuple[int, StatusUpdate]]] = {}
    for line, row in read_csv_rows(path):
        try:
            upd = StatusUpdate(
                candidate_id=row["candidate_id"].strip(),
                when=parse_date(row["date"], path, line),
                kind=row["kind"].strip(),
                payload=row.get("payload", "").strip(),
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"malformed status update: {exc}", path, line)
        updates.setdefault(upd.candidate_id, []).append((line, upd))
    out = {}
    for cand, pairs in updates.items():
        pairs.sort(key=lambda p: (p[1].when, p[0]))
        out[cand] = [u for _, u in pairs]
    return out


def load_donors(path: str | Path, table: AntigenTable) -> list[DonorArrival]:
    donors = []
    for line, row in read_csv_rows(path):
        try:
            hla = _typing_from_row(table, row, path, line)
            if hla is None:
                raise InputError("donor HLA typing is required", path, line)
            donors.append(DonorArrival(
                id=row["id"].strip(),
                report_date=parse_date(row["report_date"], path, line),
                age=int(row["age"]),
                blood_group=row["bg"].strip(),
                country=row["country"].strip(),
                center=row["center"].strip(),
                hla=hla,
                death_cause=(row.get("death_cause", "").strip() or "other"),
                dcd=parse_bool(row.get("dcd", "0"), path, line),
                last_creatinine=float(row.get("creatinine", "1.0") or 1.0),
                diabetes=parse_bool(row.get("diabetes", "0"), path, line),
                smoking=parse_bool(row.get("smoking", "0"), path, line),
                proteinuria=parse_bool(row.get("proteinuria", "0"), path, line),
                hypertension=parse_bool(row.get("hypertension", "0"), path, line),
                malignancy=parse_bool(row.get("malignancy", "0"), path, line),
                hcv_positive=parse_bool(row.get("hcv", "0"), path, line),
                hbsag_positive=parse_bool(row.get("hbs", "0"), path, line),
                extended_criteria=parse_bool(row.get("extended", "0"), path, line),
                kidneys_available=int(row.get("kidneys", "2") or 2),
            ))
        except (KeyError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"malformed donor: {exc}", path, line)
    return donors


# ---------------------------------------------------------------------------
# Full input bundle

@dataclass
class SimulationInputs:
    settings: SimulationSettings
    antigen_table: AntigenTable
    centers: CenterRegistry
    bg_freqs: BloodGroupFrequencies
    freq_table: FrequencyTable
    panel: DonorPanel
    policy: PolicyConfig
    registrations: list[CandidateRegistration]
    updates: dict[str, list[StatusUpdate]]
    donors: list[DonorArrival]
    balance_events: list[BalanceEvent]
    cox: CoxSampler
    etkas_models: AcceptanceModels
    esp_models: AcceptanceModels
    weibull: WeibullModel
    relist_curves: RelistCurveSet
    relist_pool: RelistingPool
    candidate_stream_paths: list[Path] = field(default_factory=list)
    status_stream_paths: list[Path] = field(default_factory=list)

    def with_policy(self, policy: PolicyConfig) -> "SimulationInputs":
        return replace(self, policy=policy)


def load_inputs(settings: SimulationSettings,
                policy: PolicyConfig | None = None) -> SimulationInputs:
    table = AntigenTable.from_file(settings.resolve("antigens", "antigens.csv"))
    centers = CenterRegistry.from_file(settings.resolve("centers", "centers.csv"))
    bg_freqs = BloodGroupFrequencies.from_file(
        settings.resolve("blood_group_frequencies", "blood_groups.csv"))
    freq_table = FrequencyTable.from_file(
        settings.resolve("hla_frequencies", "hla_frequencies.csv"))

    panel_path = settings.resolve("panel")
    if panel_path is None:
        raise InputError("settings must point at a donor panel (paths.panel)")
    panel = DonorPanel.from_file(table, panel_path)

    if policy is None:
        policy_path = settings.resolve("policy")
        policy = load_policy(policy_path) if policy_path else PolicyConfig()

    cand_path = settings.resolve("candidates")
    status_path = settings.resolve("statuses")
    donor_path = settings.resolve("donors")
    for key, p in (("candidates", cand_path), ("statuses", status_path),
                   ("donors", donor_path)):
        if p is None:
            raise InputError(f"settings must define paths.{key}")

    balance_path = settings.resolve("balances")
    balance_events = read_balance_events(balance_path) if balance_path else []

    cox = CoxSampler.from_files(
        settings.resolve("cox_coefficients", "cox_max_offers.csv"),
        settings.resolve("cox_baselines", "cox_baselines.csv"))
    dual = LogisticModel.from_file(settings.resolve("dual_model", "dual.csv"))
    etkas_models = AcceptanceModels(
        center=LogisticModel.from_file(
            settings.resolve("accept_etkas_center", "accept_etkas_center.csv")),
        patient=LogisticModel.from_file(
            settings.resolve("accept_etkas_patient", "accept_etkas_patient.csv")),
        dual=dual)
    esp_models = AcceptanceModels(
        center=LogisticModel.from_file(
            settings.resolve("accept_esp_center", "accept_esp_center.csv")),
        patient=LogisticModel.from_file(
            settings.resolve("accept_esp_patient", "accept_esp_patient.csv")),
        dual=dual)

    weibull = WeibullModel.from_file(
        settings.resolve("weibull", "weibull_post_transplant.csv"))
    curves = RelistCurveSet.from_file(
        settings.resolve("relist_curves", "relist_curves.csv"))
    pool = RelistingPool.from_files(
        settings.resolve("relist_pool", "relist_pool.csv"),
        settings.resolve("relist_pool_updates", "relist_pool_updates.csv"))

    return SimulationInputs(
        settings=settings,
        antigen_table=table,
        centers=centers,
        bg_freqs=bg_freqs,
        freq_table=freq_table,
        panel=panel,
        policy=policy,
        registrations=load_registrations(cand_path, table),
        updates=load_status_updates(status_path),
        donors=load_donors(donor_path, table),
        balance_events=balance_events,
        cox=cox,
        etkas_models=etkas_models,
        esp_models=esp_models,
        weibull=weibull,
        relist_curves=curves,
        relist_pool=pool,
        candidate_stream_paths=settings.resolve_many("candidate_streams"),
        status_stream_paths=settings.resolve_many("status_streams"),
    )
