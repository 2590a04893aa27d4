"""Array-backed candidate state and vectorized match-list construction.

One simulation run holds every registration's dynamic state in parallel
numpy arrays (HLA sets as per-locus bitmasks, unacceptables as bitmask
words), so building a donor's match list is a handful of vector operations
over the blood-group-compatible subset instead of a Python loop over
thousands of candidates.  The record-at-a-time rules in
:mod:`etkasim.matchlist` define the semantics; tests pin the two paths to
identical output.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date
from typing import Iterable, Mapping

import numpy as np

from .balances import BalanceLedger, donor_age_group
from .common import DAYS_PER_YEAR, InputError, to_days
from .entities import (AllocationProfile, CandidateRegistration, CenterRegistry,
                       DonorArrival, StatusUpdate, URGENCY_CODES,
                       expand_mm_patterns, parse_profile)
from .hla import (AntigenTable, BloodGroupFrequencies, DonorPanel,
                  FrequencyTable, HlaTyping, MmpInputs, carried_codes,
                  compute_hmpp_fraction, compute_mmp)
from .policy import PolicyConfig, sliding_scale_points

# status codes; PRE marks a synthetic re-listing created but not yet listed
STATUS_CODES = {code: i for i, code in enumerate(URGENCY_CODES)}
PRE = len(URGENCY_CODES)
T, NT, HU, I, R, D, FU = (STATUS_CODES[c] for c in ("T", "NT", "HU", "I", "R",
                                                    "D", "FU"))
ACTIVE_CODES = (T, NT, HU, I)
BG_CODES = {"O": 0, "A": 1, "B": 2, "AB": 3}

_NO_DATE = np.int32(-(2 ** 31) + 1)


class LocusBits:
    """Bit assignment for normalized antigen codes at one locus (max 64)."""

    def __init__(self, locus: str, codes: Iterable[str]):
        self.locus = locus
        self.bit_of: dict[str, int] = {}
        for code in sorted(set(codes)):
            if len(self.bit_of) >= 64:
                raise InputError(
                    f"locus {locus}: more than 64 distinct antigens at "
                    "counting resolution; bitmask engine cannot represent this")
            self.bit_of[code] = len(self.bit_of)

    def mask(self, codes: Iterable[str]) -> int:
        m = 0
        for code in codes:
            m |= 1 << self.bit_of[code]
        return m


class CodeWords:
    """Bit positions for raw antigen codes across W 64-bit words."""

    def __init__(self, codes: Iterable[str]):
        ordered = sorted(set(codes))
        self.n_words = max(1, (len(ordered) + 63) // 64)
        self.position: dict[str, tuple[int, int]] = {
            code: divmod(i, 64) for i, code in enumerate(ordered)}

    def words(self, codes: Iterable[str]) -> np.ndarray:
        out = np.zeros(self.n_words, dtype=np.uint64)
        for code in codes:
            w, b = self.position[code]
            out[w] |= np.uint64(1) << np.uint64(b)
        return out


class HlaIndex:
    """Shared bit layouts derived from the antigen equivalence table."""

    def __init__(self, table: AntigenTable):
        self.table = table
        by_locus: dict[str, set[str]] = {"A": set(), "B": set(), "DR": set()}
        for code in table.codes():
            locus = table.locus_of(code)
            if locus in by_locus:
                by_locus[locus].add(table.normalize(code))
        self.bits = {locus: LocusBits(locus, codes)
                     for locus, codes in by_locus.items()}
        self.words = CodeWords(table.codes())

    def locus_mask(self, typing: HlaTyping, locus: str) -> int:
        return self.bits[locus].mask(typing.normalized(self.table, locus))

    def carried_words(self, typing: HlaTyping) -> np.ndarray:
        return self.words.words(carried_codes(self.table, typing))

    def donor_locus_bits(self, typing: HlaTyping, locus: str) -> list[int]:
        return [1 << self.bits[locus].bit_of[c]
                for c in sorted(typing.normalized(self.table, locus))]


def _freq_by_bit(bits: LocusBits, dist: Mapping[str, float]) -> np.ndarray:
    out = np.zeros(64)
    for code, f in dist.items():
        if code in bits.bit_of:
            out[bits.bit_of[code]] = f
    return out


class CandidateStore:
    """Structure-of-arrays over all registrations in a run (single-writer)."""

    GROW = 256

    def __init__(self, hla_index: HlaIndex, centers: CenterRegistry,
                 panel: DonorPanel | None, freq_table: FrequencyTable | None,
                 bg_freqs: BloodGroupFrequencies, policy: PolicyConfig):
        self.hla_index = hla_index
        self.centers = centers
        self.panel = panel
        self.freq_table = freq_table
        self.bg_freqs = bg_freqs
        self.policy = policy

        self.countries = list(centers.countries)
        self.country_of = {c: i for i, c in enumerate(self.countries)}
        self.regions = list(centers.regions)
        self.region_of = {r: i for i, r in enumerate(self.regions)}
        subs = sorted({c.esp_subregion for c in centers.centers()
                       if c.esp_subregion})
        self.subregion_of = {s: i for i, s in enumerate(subs)}

        self.n = 0
        self._cap = 0
        self.registrations: list[CandidateRegistration] = []
        self.ids: list[str] = []
        self.row_of: dict[str, int] = {}
        self._deferred: set[int] | None = None

        if panel is not None:
            self._panel_words = np.stack(
                [hla_index.carried_words(t) for t in panel])
            self._panel_locus_bits = {}
            for locus in ("A", "B", "DR"):
                b1, b2 = [], []
                for t in panel:
                    bits = hla_index.donor_locus_bits(t, locus)
                    b1.append(bits[0])
                    b2.append(bits[-1])
                self._panel_locus_bits[locus] = (
                    np.array(b1, dtype=np.uint64), np.array(b2, dtype=np.uint64))
        else:
            self._panel_words = None

        self._freq_bits = None
        if freq_table is not None:
            self._freq_bits = {
                locus: _freq_by_bit(hla_index.bits[locus], freq_table.locus(locus))
                for locus in ("A", "B", "DR")}

        self._alloc(1024)

    # -- storage ------------------------------------------------------------

    def _alloc(self, cap: int) -> None:
        def grow(arr, fill, dtype, shape=()):
            new = np.full((cap, *shape), fill, dtype=dtype)
            if arr is not None:
                new[: len(arr)] = arr
            return new

        w = self.hla_index.words.n_words
        self.status = grow(getattr(self, "status", None), NT, np.int8)
        self.bg = grow(getattr(self, "bg", None), 0, np.int8)
        self.country_idx = grow(getattr(self, "country_idx", None), 0, np.int16)
        self.region_idx = grow(getattr(self, "region_idx", None), 0, np.int16)
        self.subregion_idx = grow(getattr(self, "subregion_idx", None), -1, np.int16)
        self.center_codes: list[str] = getattr(self, "center_codes", [])
        self.dob_days = grow(getattr(self, "dob_days", None), 0, np.int32)
        self.reg_days = grow(getattr(self, "reg_days", None), 0, np.int32)
        self.dial_start = grow(getattr(self, "dial_start", None), _NO_DATE, np.int32)
        self.screening = grow(getattr(self, "screening", None), _NO_DATE, np.int32)
        self.prior_tx = grow(getattr(self, "prior_tx", None), False, bool)
        self.am = grow(getattr(self, "am", None), False, bool)
        self.kaoo = grow(getattr(self, "kaoo", None), False, bool)
        self.opt_in = grow(getattr(self, "opt_in", None), False, bool)
        self.hla_known = grow(getattr(self, "hla_known", None), False, bool)
        self.choice = grow(getattr(self, "choice", None), 0, np.int8)  # 0/1 ETKAS/2 ESP
        self.mask_a = grow(getattr(self, "mask_a", None), 0, np.uint64)
        self.mask_b = grow(getattr(self, "mask_b", None), 0, np.uint64)
        self.mask_dr = grow(getattr(self, "mask_dr", None), 0, np.uint64)
        self.homo_level = grow(getattr(self, "homo_level", None), 0, np.int8)
        self.homo_b = grow(getattr(self, "homo_b", None), False, bool)
        self.homo_dr = grow(getattr(self, "homo_dr", None), False, bool)
        self.unacc = grow(getattr(self, "unacc", None), 0, np.uint64, (w,))
        self.patmask = grow(getattr(self, "patmask", None), 0, np.int32)
        self.prof_min_age = grow(getattr(self, "prof_min_age", None), 0, np.int16)
        self.prof_max_age = grow(getattr(self, "prof_max_age", None), 130, np.int16)
        self.prof_dcd = grow(getattr(self, "prof_dcd", None), True, bool)
        self.prof_ext = grow(getattr(self, "prof_ext", None), True, bool)
        self.prof_hcv = grow(getattr(self, "prof_hcv", None), True, bool)
        self.prof_hbs = grow(getattr(self, "prof_hbs", None), True, bool)
        self.vpra = grow(getattr(self, "vpra", None), 0.0, np.float64)
        self.p1mm = grow(getattr(self, "p1mm", None), 0.0, np.float64)
        self.f1mm = grow(getattr(self, "f1mm", None), -1.0, np.float64)
        self.immun_pts = grow(getattr(self, "immun_pts", None), 0.0, np.float64)
        self.f_bg = grow(getattr(self, "f_bg", None), 0.0, np.float64)
        self._cap = cap

    def _ensure(self, extra: int) -> None:
        if self.n + extra > self._cap:
            self._alloc(max(self._cap * 2, self.n + extra + self.GROW))

    # -- registration and updates -------------------------------------------

    def add(self, reg: CandidateRegistration, initial_status: str | None = None) -> int:
        self._ensure(1)
        row = self.n
        self.n += 1
        self.registrations.append(reg)
        self.ids.append(reg.id)
        if reg.id in self.row_of:
            raise InputError(f"duplicate registration id {reg.id!r}")
        self.row_of[reg.id] = row

        center = self.centers.get(reg.center)
        code = initial_status if initial_status is not None else reg.initial_urgency
        self.status[row] = PRE if code == "PRE" else STATUS_CODES[code]
        self.bg[row] = BG_CODES[reg.blood_group]
        self.country_idx[row] = self.country_of[reg.country]
        self.region_idx[row] = self.region_of[center.region]
        self.subregion_idx[row] = self.subregion_of.get(center.esp_subregion, -1)
        self.center_codes.append(reg.center)
        self.dob_days[row] = to_days(reg.date_of_birth)
        self.reg_days[row] = to_days(reg.registration_date)
        if reg.dialysis_start is not None:
            self.dial_start[row] = to_days(reg.dialysis_start)
        if reg.last_screening_date is not None:
            self.screening[row] = to_days(reg.last_screening_date)
        self.prior_tx[row] = reg.prior_transplant
        self.am[row] = reg.am_program
        self.kaoo[row] = reg.kaoo
        self.opt_in[row] = reg.esp_extended_opt_in
        self.choice[row] = {None: 0, "ETKAS": 1, "ESP": 2}[reg.german_program_choice]
        if reg.hla is not None:
            self._set_hla(row, reg.hla)
        self._set_profile(row, reg.profile)
        self.patmask[row] = _pattern_mask(reg.mm_criteria)
        self.f_bg[row] = self.bg_freqs.freq_of(reg.blood_group)
        self._set_unacceptables(row, reg.unacceptables)
        return row

    def _set_hla(self, row: int, typing: HlaTyping) -> None:
        idx = self.hla_index
        self.hla_known[row] = True
        self.mask_a[row] = idx.locus_mask(typing, "A")
        self.mask_b[row] = idx.locus_mask(typing, "B")
        self.mask_dr[row] = idx.locus_mask(typing, "DR")
        homo = [typing.is_homozygous(loc) for loc in ("A", "B", "DR")]
        self.homo_level[row] = sum(homo)
        self.homo_b[row] = homo[1]
        self.homo_dr[row] = homo[2]
        if self.freq_table is not None:
            for locus in ("A", "B", "DR"):
                dist = self.freq_table.locus(locus)
                for code in typing.normalized(idx.table, locus):
                    if code not in dist:
                        raise InputError(
                            f"candidate antigen {code!r} missing from "
                            f"frequency table at locus {locus}")
            if self._deferred is not None:
                self._deferred.add(row)
            else:
                self.p1mm[row] = self._p1mm_analytic_row(row)

    def _p1mm_analytic_row(self, row: int) -> float:
        probs = []
        for locus, mask_arr in (("A", self.mask_a), ("B", self.mask_b),
                                ("DR", self.mask_dr)):
            fb = self._freq_bits[locus]
            bits = ((mask_arr[row] >> np.arange(64, dtype=np.uint64))
                    & np.uint64(1)).astype(np.float64)
            s = float(fb @ bits)
            sq_all = float((fb ** 2).sum())
            sq_in = float(((fb ** 2) * bits).sum())
            p0 = s * s
            p1 = 2 * s * (1 - s) + (sq_all - sq_in)
            probs.append((p0, p1))
        p = probs[0][0] * probs[1][0] * probs[2][0]
        for i in range(3):
            term = probs[i][1]
            for j in range(3):
                if j != i:
                    term *= probs[j][0]
            p += term
        return p

    def _p1mm_batch(self, rows: np.ndarray) -> None:
        shifts = np.arange(64, dtype=np.uint64)[None, :]
        probs = []
        for locus, mask_arr in (("A", self.mask_a), ("B", self.mask_b),
                                ("DR", self.mask_dr)):
            fb = self._freq_bits[locus]
            bits = ((mask_arr[rows][:, None] >> shifts)
                    & np.uint64(1)).astype(np.float64)
            s = bits @ fb
            sq_all = float((fb ** 2).sum())
            sq_in = bits @ (fb ** 2)
            p0 = s * s
            p1 = 2.0 * s * (1.0 - s) + (sq_all - sq_in)
            probs.append((p0, p1))
        p = probs[0][0] * probs[1][0] * probs[2][0]
        for i in range(3):
            term = probs[i][1].copy()
            for j in range(3):
                if j != i:
                    term *= probs[j][0]
            p += term
        self.p1mm[rows] = p

    def _set_profile(self, row: int, profile: AllocationProfile | None) -> None:
        p = profile or AllocationProfile()
        self.prof_min_age[row] = p.min_donor_age
        self.prof_max_age[row] = p.max_donor_age
        self.prof_dcd[row] = p.accept_dcd
        self.prof_ext[row] = p.accept_extended_criteria
        self.prof_hcv[row] = p.accept_hcv_positive
        self.prof_hbs[row] = p.accept_hbsag_positive

    def _set_unacceptables(self, row: int, unacc: frozenset[str]) -> None:
        for code in unacc:
            if code not in self.hla_index.words.position:
                raise InputError(f"unacceptable antigen {code!r} not in the "
                                 "antigen table")
        self.unacc[row] = self.hla_index.words.words(unacc)
        if self._deferred is not None:
            self._deferred.add(row)
            return
        self.vpra[row] = self._vpra_row(row)
        self.refresh_immunization_points(row)

    # -- batched derivation at initialization -------------------------------

    def begin_deferred_derivation(self) -> None:
        """Postpone per-row vPRA / immunization-point computation until
        finalize_derived_values(); initialization folds thousands of rows and
        the batch forms are far cheaper."""
        self._deferred = set()

    def finalize_derived_values(self, chunk: int = 512) -> None:
        pending = sorted(self._deferred or ())
        self._deferred = None
        if not pending:
            return
        rows = np.array(pending, dtype=np.int64)
        if self._freq_bits is not None:
            with_hla = rows[self.hla_known[rows]]
            if len(with_hla):
                self._p1mm_batch(with_hla)
        if self._panel_words is not None:
            has_unacc = self.unacc[rows].any(axis=1)
            need = rows[has_unacc]
            for lo in range(0, len(need), chunk):
                sub = need[lo:lo + chunk]
                words = self.unacc[sub]
                hits = np.zeros((len(sub), len(self._panel_words)), dtype=bool)
                for w in range(words.shape[1]):
                    hits |= (self._panel_words[:, w][None, :]
                             & words[:, w][:, None]) != 0
                self.vpra[sub] = hits.mean(axis=1)
        cfg = self.policy
        if cfg.sliding_scale.enabled:
            for row in pending:
                self.refresh_immunization_points(int(row))
            return
        x = self.f_bg[rows] * (1.0 - self.vpra[rows]) * self.p1mm[rows]
        mmp = np.where(x >= 1.0, 0.0, np.exp(1000.0 * np.log1p(-np.minimum(x, 1.0))))
        mmp = np.clip(mmp, 0.0, 1.0)
        self.immun_pts[rows] = cfg.mmp_weight * mmp

    def _vpra_row(self, row: int) -> float:
        if self._panel_words is None or not self.unacc[row].any():
            return 0.0
        hits = (self._panel_words & self.unacc[row]).any(axis=1)
        return float(hits.mean())

    def _f1mm_row(self, row: int) -> float:
        """Empirical fraction of panel donors with <= 1 ABDR mismatch."""
        if self._panel_words is None:
            return 0.0
        total = np.zeros(len(self._panel_words), dtype=np.int8)
        for locus, mask_arr in (("A", self.mask_a), ("B", self.mask_b),
                                ("DR", self.mask_dr)):
            b1, b2 = self._panel_locus_bits[locus]
            cand = mask_arr[row]
            total += ((b1 & ~cand) != 0).astype(np.int8)
            total += (((b2 != b1) & ((b2 & ~cand) != 0))).astype(np.int8)
        return float((total <= 1).mean())

    def refresh_immunization_points(self, row: int) -> None:
        """Re-derive cached immunization-related points under the policy
        (unrounded; reports round per component)."""
        cfg = self.policy
        if cfg.sliding_scale.enabled:
            pts = sliding_scale_points(float(self.vpra[row]), cfg)
            if cfg.sliding_scale.hmpp_replaces_mmp:
                if self.f1mm[row] < 0:
                    self.f1mm[row] = self._f1mm_row(row)
                pts += cfg.mmp_weight * compute_hmpp_fraction(
                    float(self.f1mm[row]))
            self.immun_pts[row] = pts
        else:
            mmp = compute_mmp(MmpInputs(f_bg=float(self.f_bg[row]),
                                        vpra=float(self.vpra[row]),
                                        p_leq1mm=float(self.p1mm[row])))
            self.immun_pts[row] = cfg.mmp_weight * mmp

    def apply_update(self, row: int, update: StatusUpdate) -> None:
        kind, payload = update.kind, update.payload
        if kind == "URG":
            code = payload.strip()
            if code not in STATUS_CODES:
                raise InputError(f"bad urgency payload {payload!r}")
            self.status[row] = STATUS_CODES[code]
        elif kind == "PRF":
            self._set_profile(row, parse_profile(payload))
        elif kind == "UNA":
            self._set_unacceptables(row, frozenset(payload.split()))
        elif kind == "MMC":
            self.patmask[row] = _pattern_mask(expand_mm_patterns(payload))
        elif kind == "SCR":
            self.screening[row] = to_days(update.when)
        elif kind == "DIA":
            text = payload.strip()
            self.dial_start[row] = to_days(date.fromisoformat(text)) if text \
                else _NO_DATE
        elif kind == "CHO":
            choice = payload.strip().upper()
            if choice in ("ETKAS", "ESP"):
                self.choice[row] = 1 if choice == "ETKAS" else 2
            elif choice == "EXT_OPT_IN":
                self.opt_in[row] = True
            elif choice == "EXT_OPT_OUT":
                self.opt_in[row] = False
            else:
                raise InputError(f"bad choice payload {payload!r}")
        else:
            raise InputError(f"unknown update kind {kind!r}")

    def set_status(self, row: int, code: str) -> None:
        self.status[row] = STATUS_CODES[code] if code != "PRE" else PRE

    def status_code(self, row: int) -> str:
        s = int(self.status[row])
        return "PRE" if s == PRE else URGENCY_CODES[s]

    def dialysis_days(self, row: int, now_days: int) -> int:
        start = int(self.dial_start[row])
        if start == int(_NO_DATE):
            return 0
        return max(0, now_days - start)

    def age_years(self, row: int, now_days: int) -> int:
        return int((now_days - int(self.dob_days[row])) // DAYS_PER_YEAR)


def _pattern_mask(patterns: frozenset[tuple[int, int, int]]) -> int:
    mask = 0
    for a, b, dr in patterns:
        mask |= 1 << (a * 9 + b * 3 + dr)
    return mask


# ---------------------------------------------------------------------------
# Vectorized match-list construction

@dataclass
class MatchArrays:
    """One donor's ordered match list in columnar form (eligible rows only,
    already sorted by rank; components are unrounded floats)."""

    donor: DonorArrival
    program: str
    rows: np.ndarray          # store row per match record, in rank order
    filtered: np.ndarray      # bool
    tier: np.ndarray          # int16 composite, higher is better
    total: np.ndarray         # float ranking total
    mm_a: np.ndarray
    mm_b: np.ndarray
    mm_dr: np.ndarray
    geo_idx: np.ndarray       # 0 local_regional, 1 national, 2 international
    dial_days: np.ndarray
    comp_dialysis: np.ndarray
    comp_hla: np.ndarray
    comp_pediatric: np.ndarray
    comp_hu: np.ndarray
    comp_mmp: np.ndarray
    comp_balance: np.ndarray
    comp_distance: np.ndarray
    filter_fraction: np.ndarray
    age: np.ndarray
    same_region: np.ndarray
    same_country: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


GEO_LABELS = ("local_regional", "national", "international")


def build_match_arrays(store: CandidateStore, donor: DonorArrival,
                       ledger: BalanceLedger, cfg: PolicyConfig,
                       now_days: int) -> MatchArrays:
    program = "ESP" if donor.age >= cfg.esp_donor_age_from else "ETKAS"
    n = store.n
    idx = store.hla_index
    dc = store.centers.get(donor.center)
    d_country = store.country_of[dc.country]
    d_region = store.region_of[dc.region]
    d_sub = store.subregion_of.get(dc.esp_subregion, -1)

    status = store.status[:n]
    offerable = (status == T) | (status == HU)
    cand = np.flatnonzero(offerable & (store.bg[:n] == BG_CODES[donor.blood_group]))
    if len(cand) == 0:
        return _empty_arrays(donor, program)

    age = ((now_days - store.dob_days[cand]) // DAYS_PER_YEAR).astype(np.int32)

    # eligibility
    elig = store.hla_known[cand].copy()
    elig &= store.screening[cand] >= now_days - cfg.screening_max_age_days
    donor_words = idx.carried_words(donor.hla)
    hit = (store.unacc[cand] & donor_words).any(axis=1)
    elig &= ~hit
    elig &= ~store.am[cand]
    if program == "ETKAS":
        if "DE" in store.country_of:
            german_rule = ((store.country_idx[cand] == store.country_of["DE"])
                           & (age >= cfg.esp_candidate_age_from)
                           & (store.choice[cand] != 1))
            elig &= ~german_rule
    else:
        elig &= (age >= cfg.esp_candidate_age_from) | store.opt_in[cand]

    rows = cand[elig]
    if len(rows) == 0:
        return _empty_arrays(donor, program)
    age = age[elig]

    # per-locus mismatches
    def locus_mm(mask_arr, locus):
        bits = idx.donor_locus_bits(donor.hla, locus)
        m = mask_arr[rows]
        mm = ((m & np.uint64(bits[0])) == 0).astype(np.int8)
        if len(bits) > 1:
            mm += ((m & np.uint64(bits[1])) == 0).astype(np.int8)
        return mm

    mm_a = locus_mm(store.mask_a, "A")
    mm_b = locus_mm(store.mask_b, "B")
    mm_dr = locus_mm(store.mask_dr, "DR")
    mm_total = mm_a + mm_b + mm_dr

    same_country = store.country_idx[rows] == d_country
    same_region = same_country & (store.region_idx[rows] == d_region)
    geo_idx = np.where(~same_country, 2, np.where(same_region, 0, 1)).astype(np.int8)

    start = store.dial_start[rows].astype(np.int64)
    dial = np.where(start == int(_NO_DATE), 0,
                    np.maximum(0, now_days - start))

    # filtering
    profile_ok = np.ones(len(rows), dtype=bool)
    if cfg.filtering.apply_allocation_profiles:
        profile_ok &= (store.prof_min_age[rows] <= donor.age)
        profile_ok &= (store.prof_max_age[rows] >= donor.age)
        if donor.dcd:
            profile_ok &= store.prof_dcd[rows]
        if donor.extended_criteria:
            profile_ok &= store.prof_ext[rows]
        if donor.hcv_positive:
            profile_ok &= store.prof_hcv[rows]
        if donor.hbsag_positive:
            profile_ok &= store.prof_hbs[rows]

    if program == "ETKAS":
        pat_idx = (mm_a.astype(np.int32) * 9 + mm_b * 3 + mm_dr)
        pattern_hit = ((store.patmask[rows] >> pat_idx) & 1).astype(bool)
        filtered = profile_ok & ~(pattern_hit
                                  if cfg.filtering.apply_hla_mismatch_criteria
                                  else np.zeros(len(rows), dtype=bool))
        arrays = _etkas_points_arrays(store, donor, ledger, cfg, rows, age,
                                      mm_a, mm_b, mm_dr, mm_total, geo_idx,
                                      same_country, dial, now_days)
        tier = _etkas_tier_array(store, donor, cfg, rows, age, mm_total)
        total, comps, fraction = arrays
        order_total = total
    else:
        under_65 = age < cfg.esp_candidate_age_from
        german_etkas = np.zeros(len(rows), dtype=bool)
        if "DE" in store.country_of:
            german_etkas = ((store.country_idx[rows] == store.country_of["DE"])
                            & (store.choice[rows] == 1))
        filtered = profile_ok & ~under_65 & ~german_etkas
        tier = _esp_tier_array(store, donor, cfg, rows, age, d_region, d_sub,
                               same_country)
        total = dial.astype(np.float64)
        comps = {name: np.zeros(len(rows)) for name in
                 ("dialysis", "hla", "pediatric", "hu", "mmp", "balance",
                  "distance")}
        comps["dialysis"] = total.copy()
        fraction = np.ones(len(rows))
        order_total = total

    # rank: tier desc, total desc, Austrian regional key asc, registration
    # date asc, id asc (string order, fixed up after the numeric sort)
    regional = np.zeros(len(rows), dtype=np.int32)
    austria = store.country_of.get("AT")
    if austria is not None and program == "ETKAS":
        at_rows = np.flatnonzero(store.country_idx[rows] == austria)
        if len(at_rows):
            group = donor_age_group(donor.age)
            for i in at_rows:
                region = store.regions[int(store.region_idx[rows[i]])]
                regional[i] = ledger.regional_net_export(region, group)
    reg_days = store.reg_days[rows]
    order = np.lexsort((reg_days, regional, -order_total,
                        -tier.astype(np.int32)))
    order = _break_full_ties_by_id(store, rows, order, tier, order_total,
                                   regional, reg_days)

    rows = rows[order]
    return MatchArrays(
        donor=donor, program=program, rows=rows,
        filtered=filtered[order], tier=tier[order],
        total=order_total[order],
        mm_a=mm_a[order], mm_b=mm_b[order], mm_dr=mm_dr[order],
        geo_idx=geo_idx[order], dial_days=dial[order],
        comp_dialysis=comps["dialysis"][order], comp_hla=comps["hla"][order],
        comp_pediatric=comps["pediatric"][order], comp_hu=comps["hu"][order],
        comp_mmp=comps["mmp"][order], comp_balance=comps["balance"][order],
        comp_distance=comps["distance"][order],
        filter_fraction=fraction[order], age=age[order],
        same_region=same_region[order], same_country=same_country[order])


def _break_full_ties_by_id(store, rows, order, tier, total, regional,
                           reg_days) -> np.ndarray:
    """Re-sort by registration id inside groups tied on every numeric key.

    Exact ties are rare (identical tier, float total, regional key, and
    registration date), so the id tie-break costs nothing on the hot path.
    """
    t = tier[order]
    tot = total[order]
    reg = regional[order]
    rd = reg_days[order]
    same = ((t[1:] == t[:-1]) & (tot[1:] == tot[:-1])
            & (reg[1:] == reg[:-1]) & (rd[1:] == rd[:-1]))
    if not same.any():
        return order
    order = order.copy()
    i = 0
    n = len(order)
    while i < n - 1:
        if same[i]:
            j = i + 1
            while j < n - 1 and same[j]:
                j += 1
            group = sorted(order[i:j + 1],
                           key=lambda k: store.ids[int(rows[k])])
            order[i:j + 1] = group
            i = j + 1
        else:
            i += 1
    return order


def _empty_arrays(donor: DonorArrival, program: str) -> MatchArrays:
    z = np.zeros(0)
    zi = np.zeros(0, dtype=np.int64)
    zb = np.zeros(0, dtype=bool)
    return MatchArrays(
        donor=donor, program=program, rows=zi, filtered=zb,
        tier=np.zeros(0, dtype=np.int16), total=z, mm_a=zi, mm_b=zi,
        mm_dr=zi, geo_idx=zi, dial_days=zi, comp_dialysis=z, comp_hla=z,
        comp_pediatric=z, comp_hu=z, comp_mmp=z, comp_balance=z,
        comp_distance=z, filter_fraction=z, age=zi, same_region=zb,
        same_country=zb)


def _etkas_tier_array(store, donor, cfg, rows, age, mm_total):
    tier = np.ones(len(rows), dtype=np.int16)
    cand_ped = age < cfg.pediatric_candidate_age_below
    if donor.age < cfg.pediatric_donor_age_below:
        tier[cand_ped] = 2
    zero = mm_total == 0
    tier[zero] = 3
    tier = tier.astype(np.int16) * 4
    if all(donor.hla.is_homozygous(loc) for loc in ("A", "B", "DR")):
        tier[zero] += store.homo_level[rows[zero]]
    return tier


def _etkas_points_arrays(store, donor, ledger, cfg, rows, age, mm_a, mm_b,
                         mm_dr, mm_total, geo_idx, same_country, dial,
                         now_days):
    n = len(rows)
    comp_dial = cfg.dialysis_points_per_year * dial / DAYS_PER_YEAR
    hla = (cfg.hla_base_points + mm_a * cfg.hla_mm_beta_a
           + mm_b * cfg.hla_mm_beta_b + mm_dr * cfg.hla_mm_beta_dr)
    np.maximum(hla, 0.0, out=hla)
    ped = age < cfg.pediatric_candidate_age_below
    if cfg.pediatric_hla_double:
        hla[ped] *= 2.0
    comp_ped = np.where(ped, cfg.pediatric_bonus, 0.0)
    comp_hu = np.where(store.status[rows] == HU, cfg.hu_points, 0.0)
    comp_mmp = store.immun_pts[rows].astype(np.float64)

    group = donor_age_group(donor.age)
    bal_by_country = np.zeros(len(store.countries))
    floor = min(ledger.net_export(c, group) for c in ledger.countries)
    for i, country in enumerate(store.countries):
        export = ledger.net_export(country, group)
        bal_by_country[i] = (export - floor) * cfg.balance_weight(country)
    comp_bal = bal_by_country[store.country_idx[rows]]

    dist_table = np.zeros((len(store.countries), 3))
    for i, country in enumerate(store.countries):
        schedule = cfg.distance_schedule(country)
        dist_table[i, 0] = schedule.get("local_regional", 0.0)
        dist_table[i, 1] = schedule.get("national", 0.0)
    comp_dist = dist_table[store.country_idx[rows], geo_idx] * same_country

    raw_total = (comp_dial + hla + comp_ped + comp_hu + comp_mmp + comp_bal
                 + comp_dist)
    fraction = np.ones(n)
    if cfg.age_filter.enabled:
        xs = np.array([x for x, _ in sorted(cfg.age_filter.curve)])
        ys = np.array([y for _, y in sorted(cfg.age_filter.curve)])
        fraction = np.interp(age - donor.age, xs, ys)
    total = fraction * raw_total
    comps = {"dialysis": comp_dial, "hla": hla, "pediatric": comp_ped,
             "hu": comp_hu, "mmp": comp_mmp, "balance": comp_bal,
             "distance": comp_dist}
    return total, comps, fraction


def _esp_tier_array(store, donor, cfg, rows, age, d_region, d_sub, same_country):
    dc = store.centers.get(donor.center)
    table = cfg.esp_tier_table(dc.country)
    n_tiers = len(table)
    tier_rank = np.full(len(rows), n_tiers, dtype=np.int16)
    age_class_65 = age >= cfg.esp_candidate_age_from
    same_region = same_country & (store.region_idx[rows] == d_region)
    same_sub = (store.subregion_idx[rows] == d_sub) & (d_sub >= 0)
    scope_masks = {
        "subregion": same_sub,
        "region": same_region,
        "national": same_country,
        "international": np.ones(len(rows), dtype=bool),
    }
    for index in range(n_tiers - 1, -1, -1):
        scope, klass = table[index]
        klass_mask = age_class_65 if klass == "65plus" else ~age_class_65
        mask = scope_masks[scope] & klass_mask
        tier_rank[mask] = index
    subtier = np.zeros(len(rows), dtype=np.int16)
    subtier[store.kaoo[rows]] = 1
    subtier[store.status[rows] == HU] = 2
    return ((n_tiers - tier_rank) * 4 + subtier).astype(np.int16)
