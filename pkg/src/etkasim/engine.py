"""The discrete-event core: future event set, initialization, dispatch.

Three event kinds drive a run: balance updates (international transplants
outside the simulated programs), patient status updates, and donor arrivals.
Same-timestamp events process balance first, then patient, then donor, with
an insertion sequence number as the final tie-break, so replays under a
fixed seed are bit-identical.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .balances import BalanceEvent, BalanceLedger, donor_age_group
from .common import DAYS_PER_YEAR, InputError, from_days, to_days
from .entities import DonorArrival, StatusUpdate
from .fastmatch import (ACTIVE_CODES, CandidateStore, HlaIndex, HU,
                        MatchArrays, build_match_arrays, GEO_LABELS)
from .io import SimulationInputs
from .matchlist import ETKAS
from .offering import (MissingFeatureError, donor_features,
                       center_offer_features, run_allocation)
from .posttransplant import (build_synthetic_relisting, sample_failure_time,
                             sample_relist_time)

# event type priorities within one day
PRIO_BALANCE = 0
PRIO_PATIENT = 1
PRIO_DONOR = 2


@dataclass
class TransplantRecord:
    donor_id: str
    candidate_id: str
    when_days: int
    program: str
    mechanism: str
    forced: bool
    dual: bool
    kidneys: int
    rank: int
    mm_a: int
    mm_b: int
    mm_dr: int
    geography: str
    total_points: float
    comp: dict[str, float]
    cand_country: str
    donor_country: str
    cand_age: int
    donor_age: int
    dialysis_days: int
    vpra: float
    prior_transplant: bool
    homo_b: bool
    homo_dr: bool

    @property
    def when(self) -> date:
        return from_days(self.when_days)

    @property
    def mm_total(self) -> int:
        return self.mm_a + self.mm_b + self.mm_dr


@dataclass
class SimulationOutput:
    start: date
    end: date
    transplants: list[TransplantRecord]
    final_states: list[tuple[str, str, int]]  # id, status, status day
    counters: dict[str, float]
    ledger: BalanceLedger
    event_log: list[tuple]
    init_statuses: dict[str, tuple[str, int]]
    init_ledger_snapshot: dict
    offer_traces: list[tuple] = field(default_factory=list)
    invariant_failures: list[str] = field(default_factory=list)


class SimState:
    """Everything one run mutates: candidate store, ledger, FES, counters."""

    def __init__(self, inputs: SimulationInputs, seed: int,
                 check_invariants: bool = False, collect_trace: bool = False):
        self.inputs = inputs
        self.policy = inputs.policy
        self.rng = np.random.default_rng(seed)
        self.start_days = to_days(inputs.settings.window_start)
        self.end_days = to_days(inputs.settings.window_end)
        self.check_invariants = check_invariants
        self.collect_trace = collect_trace

        self.hla_index = HlaIndex(inputs.antigen_table)
        self.store = CandidateStore(
            self.hla_index, inputs.centers, inputs.panel, inputs.freq_table,
            inputs.bg_freqs, inputs.policy)

        austrian_regions = sorted({
            c.region for c in inputs.centers.centers() if c.country == "AT"})
        self.ledger = BalanceLedger(inputs.centers.countries, austrian_regions)

        self.fes: list[tuple] = []
        self._seq = 0
        self.updates_of: dict[int, list] = {}
        self.person_tx_count: dict[str, int] = {}
        self.person_active_row: dict[str, int] = {}
        self.relist_serial: dict[str, int] = {}

        self.transplants: list[TransplantRecord] = []
        self.event_log: list[tuple] = []
        self.offer_traces: list[tuple] = []
        self.invariant_failures: list[str] = []
        self.counters: dict[str, float] = {
            "kidneys.available": 0, "kidneys.transplanted": 0,
            "kidneys.discarded": 0, "wl.listings": 0, "wl.relists_created": 0,
            "wl.removals": 0, "wl.deaths": 0, "donors.seen": 0,
            "relists.no_pool_match": 0,
        }
        self._listed = set()
        self.status_day: dict[int, int] = {}
        self.init_statuses: dict[str, tuple[str, int]] = {}
        self.init_ledger: BalanceLedger | None = None

    # -- future event set -----------------------------------------------

    def schedule(self, when_days: int, prio: int, kind: str, *payload) -> None:
        self._seq += 1
        heapq.heappush(self.fes, (when_days, prio, self._seq, kind, payload))

    # -- bookkeeping ------------------------------------------------------

    def _mark_listed(self, row: int) -> None:
        if row not in self._listed and int(self.store.status[row]) in ACTIVE_CODES:
            self._listed.add(row)
            self.counters["wl.listings"] += 1

    def log_status(self, row: int, code: str, when_days: int) -> None:
        self.event_log.append(("status", self.store.ids[row], code, when_days))
        self.status_day[row] = when_days

    def apply_urgency_counters(self, row: int, old: str, new: str,
                               when_days: int) -> None:
        if new == "D" and old not in ("R", "D", "FU"):
            self.counters["wl.deaths"] += 1
            country = self.store.registrations[row].country
            self.counters[f"country.{country}.wl_deaths"] = (
                self.counters.get(f"country.{country}.wl_deaths", 0) + 1)
        if new == "R" and old not in ("R", "D", "FU"):
            self.counters["wl.removals"] += 1


def initialize(inputs: SimulationInputs, seed: int = 1,
               check_invariants: bool = False,
               collect_trace: bool = False) -> SimState:
    """Build the initial system state and future event set.

    Pre-window status updates fold into candidate states; pre-window balance
    events fold into the ledger; each candidate gets exactly one pending
    patient event (their first in-window update); in-window donors and
    balance updates are scheduled.  Repeat registrations whose previous
    transplant falls inside the window are excluded - the simulation itself
    generates those re-listings.
    """
    state = SimState(inputs, seed, check_invariants, collect_trace)
    store = state.store
    store.begin_deferred_derivation()
    start, end = state.start_days, state.end_days

    seen_ids: dict[str, int] = {}
    spells: dict[str, list[tuple[int, int, str]]] = {}

    for reg in inputs.registrations:
        if reg.id in seen_ids:
            raise InputError(f"duplicate registration id {reg.id!r}")
        seen_ids[reg.id] = 1
        updates = inputs.updates.get(reg.id, [])
        for a, b in zip(updates, updates[1:]):
            if a.when > b.when:
                raise InputError("status updates out of order after sorting")

        if (reg.previous_transplant_date is not None
                and start <= to_days(reg.previous_transplant_date) <= end):
            continue
        reg_days = to_days(reg.registration_date)
        if reg_days > end:
            continue

        # fold pre-window updates; find the first in-window one
        urgency = reg.initial_urgency
        folded: list = []
        first_pending: int | None = None
        for i, upd in enumerate(updates):
            if to_days(upd.when) < start:
                folded.append(upd)
            else:
                first_pending = i
                break
        terminal_before = any(
            u.kind == "URG" and u.payload.strip() in ("R", "D", "FU")
            for u in folded)
        if terminal_before:
            continue

        # registrations dated inside the window are not listed yet; their
        # first status update (at the registration date) activates them
        initial = "PRE" if reg_days > start else None
        row = store.add(reg, initial_status=initial)
        state.person_tx_count.setdefault(reg.patient_id, 0)
        state.person_active_row[reg.patient_id] = row
        for upd in folded:
            store.apply_update(row, upd)
        state.updates_of[row] = updates
        if first_pending is not None:
            upd = updates[first_pending]
            state.schedule(to_days(upd.when), PRIO_PATIENT, "patient",
                           row, first_pending)
        state._mark_listed(row)

        # overlapping spells for one patient are an input error
        pid = reg.patient_id
        spells.setdefault(pid, []).append((reg_days, row, reg.id))

    for pid, entries in spells.items():
        if len(entries) > 1:
            entries.sort()
            for (a_start, a_row, a_id), (b_start, b_row, b_id) in zip(
                    entries, entries[1:]):
                a_updates = state.updates_of.get(a_row, [])
                a_end = None
                for u in a_updates:
                    if u.kind == "URG" and u.payload.strip() in ("R", "D", "FU"):
                        a_end = to_days(u.when)
                if a_end is not None and b_start < a_end:
                    raise InputError(
                        f"registrations {a_id!r} and {b_id!r} for patient "
                        f"{pid!r} overlap in time")

    # balance stream: fold history, schedule in-window events
    for event in inputs.balance_events:
        when = to_days(event.when)
        if when <= start:
            state.ledger.record_transfer(event)
        elif when <= end:
            state.schedule(when, PRIO_BALANCE, "balance", event)

    for i, donor in enumerate(inputs.donors):
        when = to_days(donor.report_date)
        if start <= when <= end:
            state.schedule(when, PRIO_DONOR, "donor", i)

    store.finalize_derived_values()
    state.init_statuses = {
        store.ids[row]: (store.status_code(row), start)
        for row in range(store.n)}
    state.init_ledger = state.ledger.copy()
    return state


def run(state: SimState) -> SimulationOutput:
    """Process the future event set until it drains or passes the window end."""
    inputs = state.inputs
    store = state.store
    end = state.end_days

    while state.fes:
        when, prio, seq, kind, payload = state.fes[0]
        if when > end:
            break
        heapq.heappop(state.fes)
        if kind == "balance":
            _handle_balance(state, payload[0], when)
        elif kind == "patient":
            _handle_patient(state, payload[0], payload[1], when)
        elif kind == "failure":
            _handle_failure(state, payload[0], payload[1], when)
        elif kind == "donor":
            _handle_donor(state, inputs.donors[payload[0]], when)
        else:  # pragma: no cover
            raise AssertionError(f"unknown event kind {kind!r}")
        if state.check_invariants:
            _check_conservation(state)

    final_states = [(store.ids[row], store.status_code(row),
                     state.status_day.get(row, state.start_days))
                    for row in range(store.n)]
    counters = dict(state.counters)
    counters["wl.final_active"] = sum(
        1 for row in range(store.n)
        if int(store.status[row]) in ACTIVE_CODES)
    return SimulationOutput(
        start=inputs.settings.window_start,
        end=inputs.settings.window_end,
        transplants=state.transplants,
        final_states=final_states,
        counters=counters,
        ledger=state.ledger,
        event_log=state.event_log,
        init_statuses=state.init_statuses,
        init_ledger_snapshot=state.init_ledger.snapshot(),
        offer_traces=state.offer_traces,
        invariant_failures=state.invariant_failures,
    )


def _check_conservation(state: SimState) -> None:
    for group in ("0-17", "18-49", "50-64", "65+"):
        total = state.ledger.group_sum(group)
        if total != 0:
            state.invariant_failures.append(
                f"ledger sum {total} != 0 in group {group}")


def _handle_balance(state: SimState, event: BalanceEvent, when: int) -> None:
    state.ledger.record_transfer(event)
    state.event_log.append(("balance", event.donor_country,
                            event.recipient_country, event.donor_age,
                            event.program, event.donor_region,
                            event.recipient_region, when))


def _handle_patient(state: SimState, row: int, upd_idx: int, when: int) -> None:
    store = state.store
    current = store.status_code(row)
    if current in ("R", "D", "FU"):
        return  # spell already ended (e.g. transplanted by the simulation)
    updates = state.updates_of.get(row, [])
    if upd_idx >= len(updates):
        return
    upd = updates[upd_idx]
    old = current
    store.apply_update(row, upd)
    if row not in state._listed:
        state._mark_listed(row)
    if upd.kind == "URG":
        new = store.status_code(row)
        state.log_status(row, new, when)
        state.apply_urgency_counters(row, old, new, when)
        if new in ("R", "D"):
            state.person_active_row.pop(
                store.registrations[row].patient_id, None)
    if upd_idx + 1 < len(updates):
        nxt = updates[upd_idx + 1]
        state.schedule(to_days(nxt.when), PRIO_PATIENT, "patient",
                       row, upd_idx + 1)


def _handle_failure(state: SimState, person_id: str, expected_count: int,
                    when: int) -> None:
    """Post-transplant failure: the person dies now unless re-transplanted."""
    if state.person_tx_count.get(person_id) != expected_count:
        return  # a later transplant re-drew the failure time
    row = state.person_active_row.get(person_id)
    if row is None:
        return  # never re-listed (death happens off the waiting list)
    store = state.store
    current = store.status_code(row)
    if current in ("R", "D", "FU"):
        return
    old = current
    store.set_status(row, "D")
    state.log_status(row, "D", when)
    state.apply_urgency_counters(row, old, "D", when)
    state.person_active_row.pop(person_id, None)


# ---------------------------------------------------------------------------
# Donor events

def _patient_prob_vector(model, donor: DonorArrival, arrays: MatchArrays,
                         store: CandidateStore, cfg) -> np.ndarray:
    """Vectorized patient-level acceptance probabilities, matching
    offering.patient_offer_features value for value."""
    n = len(arrays.rows)
    donor_scalar = donor_features(donor)

    def col(name: str):
        if name in donor_scalar:
            return donor_scalar[name]
        if name == "cand_age":
            return arrays.age.astype(np.float64)
        if name == "cand_age_dec":
            return arrays.age / 10.0
        if name == "cand_pediatric":
            return (arrays.age < cfg.pediatric_candidate_age_below).astype(float)
        if name == "cand_hu":
            return (store.status[arrays.rows] == HU).astype(float)
        if name == "cand_vpra":
            return store.vpra[arrays.rows]
        if name == "cand_dialysis_years":
            return arrays.dial_days / DAYS_PER_YEAR
        if name == "cand_prior_tx":
            return store.prior_tx[arrays.rows].astype(float)
        if name == "mm_total":
            return (arrays.mm_a + arrays.mm_b + arrays.mm_dr).astype(float)
        if name == "mm_dr":
            return arrays.mm_dr.astype(float)
        if name == "age_diff_abs":
            return np.abs(arrays.age - donor.age).astype(float)
        if name == "match_local":
            return (arrays.geo_idx == 0).astype(float)
        if name == "match_national":
            return (arrays.geo_idx == 1).astype(float)
        if name == "match_international":
            return (arrays.geo_idx == 2).astype(float)
        if name == "offer_rank":
            return np.arange(1, n + 1, dtype=np.float64)
        raise MissingFeatureError(name, model.model_id)

    lp = np.full(n, model.intercept, dtype=np.float64)
    for name, beta in model.coefficients.items():
        lp += beta * col(name)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-lp))


class ArrayOffers:
    """Offer accessor over one donor's MatchArrays; nothing materializes for
    the untouched bulk of the list."""

    def __init__(self, store: CandidateStore, arrays: MatchArrays,
                 probs: np.ndarray):
        self.store = store
        self.arrays = arrays
        self.probs = probs

    def __len__(self) -> int:
        return len(self.arrays.rows)

    def candidate_id(self, i: int) -> str:
        return self.store.ids[int(self.arrays.rows[i])]

    def center(self, i: int) -> str:
        return self.store.center_codes[int(self.arrays.rows[i])]

    def filtered(self, i: int) -> bool:
        return bool(self.arrays.filtered[i])

    def age(self, i: int) -> float:
        return float(self.arrays.age[i])

    def probability(self, i: int, patient_model) -> float:
        return float(self.probs[i])

    def vicinity_order(self, indices) -> list[int]:
        if not indices:
            return []
        idx = np.asarray(indices)
        order = np.lexsort((idx, ~self.arrays.same_country[idx],
                            ~self.arrays.same_region[idx]))
        return [int(i) for i in idx[order]]


def _handle_donor(state: SimState, donor: DonorArrival, when: int) -> None:
    inputs = state.inputs
    store = state.store
    cfg = state.policy
    state.counters["donors.seen"] += 1
    state.counters["kidneys.available"] += donor.kidneys_available

    arrays = build_match_arrays(store, donor, state.ledger, cfg, when)
    program = arrays.program
    models = inputs.etkas_models if program == ETKAS else inputs.esp_models

    if len(arrays) == 0:
        state.counters["kidneys.discarded"] += donor.kidneys_available
        state.event_log.append(("discard", donor.id, donor.kidneys_available,
                                when))
        return

    k_max = inputs.cox.sample(program, donor.country, donor_features(donor),
                              state.rng)
    probs = _patient_prob_vector(models.patient, donor, arrays, store, cfg)
    offers = ArrayOffers(store, arrays, probs)

    def center_feats(center_code: str):
        return center_offer_features(donor, center_code, inputs.centers,
                                     store.countries)

    outcome = run_allocation(
        offers, donor, k_max, models, state.rng,
        unplaced_mode=inputs.settings.unplaced_mode,
        center_features=center_feats,
        collect_trace=state.collect_trace)

    if state.collect_trace:
        for entry in outcome.trace:
            state.offer_traces.append(
                (donor.id, entry.candidate_id, entry.center, entry.stage,
                 entry.decision, entry.probability))

    for acc in outcome.acceptances:
        _record_transplant(state, donor, arrays, acc.index, acc, when)

    if outcome.unplaced:
        state.counters["kidneys.discarded"] += outcome.unplaced
        state.event_log.append(("discard", donor.id, outcome.unplaced, when))


def _record_transplant(state: SimState, donor: DonorArrival,
                       arrays: MatchArrays, i: int, acc, when: int) -> None:
    store = state.store
    inputs = state.inputs
    row = int(arrays.rows[i])
    reg = store.registrations[row]
    cand_age = store.age_years(row, when)

    record = TransplantRecord(
        donor_id=donor.id,
        candidate_id=reg.id,
        when_days=when,
        program=arrays.program,
        mechanism=acc.mechanism,
        forced=acc.forced,
        dual=acc.kidneys == 2,
        kidneys=acc.kidneys,
        rank=acc.rank,
        mm_a=int(arrays.mm_a[i]), mm_b=int(arrays.mm_b[i]),
        mm_dr=int(arrays.mm_dr[i]),
        geography=GEO_LABELS[int(arrays.geo_idx[i])],
        total_points=float(arrays.total[i]),
        comp={
            "dialysis": float(arrays.comp_dialysis[i]),
            "hla": float(arrays.comp_hla[i]),
            "pediatric": float(arrays.comp_pediatric[i]),
            "hu": float(arrays.comp_hu[i]),
            "mmp": float(arrays.comp_mmp[i]),
            "balance": float(arrays.comp_balance[i]),
            "distance": float(arrays.comp_distance[i]),
        },
        cand_country=reg.country,
        donor_country=donor.country,
        cand_age=cand_age,
        donor_age=donor.age,
        dialysis_days=int(arrays.dial_days[i]),
        vpra=float(store.vpra[row]),
        prior_transplant=bool(store.prior_tx[row]),
        homo_b=bool(store.homo_b[row]),
        homo_dr=bool(store.homo_dr[row]),
    )
    state.transplants.append(record)
    state.counters["kidneys.transplanted"] += acc.kidneys
    state.event_log.append(("transplant", donor.id, reg.id, when, acc.kidneys))

    store.set_status(row, "FU")
    state.log_status(row, "FU", when)
    state.person_active_row.pop(reg.patient_id, None)
    state.person_tx_count[reg.patient_id] = (
        state.person_tx_count.get(reg.patient_id, 0) + 1)

    # cross-border transplants move the kidney balance (and the Austrian
    # regional sub-balance when an Austrian side is involved)
    if donor.country != reg.country:
        donor_center = inputs.centers.get(donor.center)
        cand_center = inputs.centers.get(reg.center)
        event = BalanceEvent(
            when=from_days(when), donor_country=donor.country,
            recipient_country=reg.country, donor_age=donor.age,
            program=arrays.program,
            donor_region=(donor_center.region
                          if donor.country == "AT" else None),
            recipient_region=(cand_center.region
                              if reg.country == "AT" else None))
        state.ledger.record_transfer(event)
        state.event_log.append(
            ("balance", event.donor_country, event.recipient_country,
             event.donor_age, event.program, event.donor_region,
             event.recipient_region, when))

    _post_transplant(state, donor, row, record, when)


def _post_transplant(state: SimState, donor: DonorArrival, row: int,
                     record: TransplantRecord, when: int) -> None:
    inputs = state.inputs
    store = state.store
    reg = store.registrations[row]

    features = donor_features(donor)
    features.update({
        "cand_age": float(record.cand_age),
        "cand_dialysis_years": record.dialysis_days / DAYS_PER_YEAR,
        "cand_prior_tx": float(record.prior_transplant),
        "mm_total": float(record.mm_total),
        "mm_dr": float(record.mm_dr),
        "cross_border": float(donor.country != reg.country),
        "non_standard": float(record.mechanism == "non_standard"),
        "tx_year_index": (from_days(when).year
                          - inputs.settings.window_start.year),
    })
    t_days = sample_failure_time(features, reg.country, inputs.weibull,
                                 state.rng)
    failure_days = when + max(1, int(round(t_days)))
    tx_count = state.person_tx_count[reg.patient_id]
    state.schedule(failure_days, PRIO_PATIENT, "failure", reg.patient_id,
                   tx_count)

    r_days = sample_relist_time(max(t_days, 1.0), record.cand_age,
                                inputs.relist_curves, state.rng)
    if r_days is None:
        return
    relist_days = when + max(1, int(round(r_days)))
    if relist_days >= failure_days or relist_days > state.end_days:
        return

    serial = state.relist_serial.get(reg.patient_id, 0) + 1
    state.relist_serial[reg.patient_id] = serial
    current_unacc = frozenset(store_unacceptables(store, row))
    built = build_synthetic_relisting(
        reg, current_unacc, from_days(when), t_days,
        float(relist_days - when), donor.hla, inputs.relist_pool,
        inputs.antigen_table, inputs.settings.de_novo_immunization_p,
        state.rng, new_id=f"{reg.patient_id}.r{serial}")
    if built is None:
        state.counters["relists.no_pool_match"] += 1
        return
    synthetic, match = built
    new_row = store.add(synthetic, initial_status="PRE")
    state.status_day[new_row] = relist_days
    state.person_active_row[reg.patient_id] = new_row
    state.counters["wl.relists_created"] += 1
    state.event_log.append(("relist", synthetic.id, relist_days))

    # copied urgency stream, with a screening refresh at every status so the
    # synthetic spell stays visible to eligibility the way a followed-up
    # repeat candidate would
    updates = []
    for offset, code in match.status_updates:
        upd_date = from_days(relist_days + offset)
        updates.append(StatusUpdate(synthetic.id, upd_date, "SCR", ""))
        updates.append(StatusUpdate(synthetic.id, upd_date, "URG", code))
    state.updates_of[new_row] = updates
    state.schedule(relist_days + match.status_updates[0][0], PRIO_PATIENT,
                   "patient", new_row, 0)


def store_unacceptables(store: CandidateStore, row: int) -> set[str]:
    """Decode the candidate's current unacceptable set from its bit words."""
    out = set()
    words = store.unacc[row]
    for code, (w, b) in store.hla_index.words.position.items():
        if words[w] & (np.uint64(1) << np.uint64(b)):
            out.add(code)
    return out


# ---------------------------------------------------------------------------
# Replay check: fold the event log back into a final state

def replay_final_state(output: SimulationOutput) -> tuple[dict, dict]:
    """Fold the run's event log over the initial snapshot.

    Returns (statuses, ledger_net) which must equal the run's own final
    state exactly; any divergence means the engine mutated state without
    logging it (or vice versa).
    """
    statuses: dict[str, tuple[str, int]] = dict(output.init_statuses)
    net: dict = dict(output.init_ledger_snapshot)
    for entry in output.event_log:
        kind = entry[0]
        if kind == "status":
            _, cand_id, code, when = entry
            statuses[cand_id] = (code, when)
        elif kind == "relist":
            _, cand_id, when = entry
            statuses[cand_id] = ("PRE", when)
        elif kind == "balance":
            (_, donor_c, recip_c, donor_age, program, d_region, r_region,
             when) = entry
            if donor_c != recip_c:
                group = donor_age_group(donor_age)
                net[(donor_c, group)] = net.get((donor_c, group), 0) + 1
                net[(recip_c, group)] = net.get((recip_c, group), 0) - 1
    return statuses, net


def verify_replay(output: SimulationOutput) -> list[str]:
    """Differences between the replayed log and the recorded final state."""
    statuses, net = replay_final_state(output)
    problems = []
    final = {cid: (code, day) for cid, code, day in output.final_states}
    if statuses != final:
        diff = {k for k in set(statuses) | set(final)
                if statuses.get(k) != final.get(k)}
        problems.append(f"status mismatch for {len(diff)} candidates "
                        f"(e.g. {sorted(diff)[:3]})")
    if net != output.ledger.snapshot():
        problems.append("ledger mismatch after replay")
    return problems
