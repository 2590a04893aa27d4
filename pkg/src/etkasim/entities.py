"""Waiting-list registrations, donors, status updates, and center geography."""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import date
from pathlib import Path
from typing import Sequence

from .common import InputError, read_csv_rows
from .hla import HlaTyping

# Urgency codes: T transplantable, NT non-transplantable, HU high urgency,
# I active in the immunized (acceptable mismatch) program, R removed,
# D waiting-list death, FU transplanted.
URGENCY_CODES = ("T", "NT", "HU", "I", "R", "D", "FU")
TERMINAL_CODES = ("R", "D", "FU")
OFFERABLE_CODES = ("T", "HU")


@dataclass(frozen=True)
class Center:
    code: str
    country: str
    region: str
    esp_subregion: str | None = None


class CenterRegistry:
    """Maps center codes to (country, region, ESP subregion)."""

    def __init__(self, centers: Sequence[Center]):
        self._by_code = {c.code: c for c in centers}
        self.countries = tuple(sorted({c.country for c in centers}))
        self.regions = tuple(sorted({c.region for c in centers}))

    @classmethod
    def from_file(cls, path: str | Path) -> "CenterRegistry":
        centers = []
        for line, row in read_csv_rows(path):
            try:
                centers.append(Center(
                    code=row["center"].strip(),
                    country=row["country"].strip(),
                    region=row["region"].strip(),
                    esp_subregion=row.get("esp_subregion", "").strip() or None,
                ))
            except KeyError as exc:
                raise InputError(f"missing column {exc}", path, line)
        return cls(centers)

    def get(self, code: str) -> Center:
        try:
            return self._by_code[code]
        except KeyError:
            raise InputError(f"unknown center code {code!r}") from None

    def __contains__(self, code: str) -> bool:
        return code in self._by_code

    def centers(self) -> Sequence[Center]:
        return tuple(self._by_code.values())


def geography_class(donor_center: Center, candidate_center: Center) -> str:
    """local_regional / national / international from center locations."""
    if donor_center.country != candidate_center.country:
        return "international"
    if donor_center.region == candidate_center.region:
        return "local_regional"
    return "national"


@dataclass(frozen=True)
class AllocationProfile:
    """Donor characteristics a candidate's center is willing to accept.

    All-accepting by default; a registration without a profile behaves like
    this default.
    """

    min_donor_age: int = 0
    max_donor_age: int = 130
    accept_dcd: bool = True
    accept_extended_criteria: bool = True
    accept_hcv_positive: bool = True
    accept_hbsag_positive: bool = True

    def accepts(self, donor: "DonorArrival") -> bool:
        if not self.min_donor_age <= donor.age <= self.max_donor_age:
            return False
        if donor.dcd and not self.accept_dcd:
            return False
        if donor.extended_criteria and not self.accept_extended_criteria:
            return False
        if donor.hcv_positive and not self.accept_hcv_positive:
            return False
        if donor.hbsag_positive and not self.accept_hbsag_positive:
            return False
        return True


def parse_profile(text: str, path=None, line=None) -> AllocationProfile | None:
    """Parse 'key=value;key=value' profile payloads; empty text clears it."""
    text = text.strip()
    if not text:
        return None
    kwargs = {}
    mapping = {
        "min_age": ("min_donor_age", int),
        "max_age": ("max_donor_age", int),
        "accept_dcd": ("accept_dcd", lambda v: v == "1"),
        "accept_ext": ("accept_extended_criteria", lambda v: v == "1"),
        "accept_hcv": ("accept_hcv_positive", lambda v: v == "1"),
        "accept_hbs": ("accept_hbsag_positive", lambda v: v == "1"),
    }
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in mapping:
            raise InputError(f"unknown profile key {key!r}", path, line)
        attr, conv = mapping[key]
        try:
            kwargs[attr] = conv(value.strip())
        except ValueError:
            raise InputError(f"bad profile value {value!r} for {key}", path, line)
    return AllocationProfile(**kwargs)


def expand_mm_patterns(spec: str) -> frozenset[tuple[int, int, int]]:
    """Expand HLA mismatch criteria like '222' or '**2' into (a,b,dr) triples.

    Each pattern is three characters over digits 0-2 or '*' (any), in
    (A, B, DR) order; the result is the set of disallowed combinations.
    """
    patterns: set[tuple[int, int, int]] = set()
    for token in spec.split():
        if len(token) != 3:
            raise InputError(f"mismatch pattern {token!r} must have 3 characters")
        choices = []
        for ch in token:
            if ch == "*":
                choices.append((0, 1, 2))
            elif ch in "012":
                choices.append((int(ch),))
            else:
                raise InputError(f"bad character {ch!r} in mismatch pattern "
                                 f"{token!r}")
        for a in choices[0]:
            for b in choices[1]:
                for dr in choices[2]:
                    patterns.add((a, b, dr))
    return frozenset(patterns)


@dataclass(frozen=True)
class CandidateRegistration:
    """Static attributes of one waiting-list registration.

    Dynamic state (urgency, profile, unacceptables, screening date, dialysis
    start) starts from the values here and evolves through status updates.
    """

    id: str
    patient_id: str
    country: str
    center: str
    blood_group: str
    date_of_birth: date
    registration_date: date
    hla: HlaTyping | None = None
    unacceptables: frozenset[str] = frozenset()
    dialysis_start: date | None = None
    prior_transplant: bool = False
    previous_transplant_date: date | None = None
    last_screening_date: date | None = None
    initial_urgency: str = "NT"
    profile: AllocationProfile | None = None
    mm_criteria: frozenset[tuple[int, int, int]] = frozenset()
    am_program: bool = False
    kaoo: bool = False
    esp_extended_opt_in: bool = False
    german_program_choice: str | None = None  # "ETKAS" | "ESP" | None

    def __post_init__(self):
        if self.blood_group not in ("O", "A", "B", "AB"):
            raise ValueError(f"{self.id}: bad blood group {self.blood_group!r}")
        if self.initial_urgency not in URGENCY_CODES:
            raise ValueError(f"{self.id}: bad urgency {self.initial_urgency!r}")


# update kinds: URG urgency change, PRF allocation profile, UNA unacceptable
# antigens, MMC HLA mismatch criteria, SCR antibody screening, DIA dialysis
# start, CHO program choice / ESP extended-allocation opt-in.
UPDATE_KINDS = ("URG", "PRF", "UNA", "MMC", "SCR", "DIA", "CHO")


@dataclass(frozen=True)
class StatusUpdate:
    candidate_id: str
    when: date
    kind: str
    payload: str = ""

    def __post_init__(self):
        if self.kind not in UPDATE_KINDS:
            raise ValueError(f"unknown update kind {self.kind!r}")


@dataclass(frozen=True)
class DonorArrival:
    """A reported deceased donor with 1 or 2 kidneys available."""

    id: str
    report_date: date
    age: int
    blood_group: str
    country: str
    center: str
    hla: HlaTyping
    death_cause: str = "other"
    dcd: bool = False
    last_creatinine: float = 1.0
    diabetes: bool = False
    smoking: bool = False
    proteinuria: bool = False
    hypertension: bool = False
    malignancy: bool = False
    hcv_positive: bool = False
    hbsag_positive: bool = False
    extended_criteria: bool = False
    kidneys_available: int = 2

    def __post_init__(self):
        if self.age < 0:
            raise ValueError(f"{self.id}: negative donor age")
        if self.kidneys_available not in (1, 2):
            raise ValueError(f"{self.id}: kidneys_available must be 1 or 2")
        if self.blood_group not in ("O", "A", "B", "AB"):
            raise ValueError(f"{self.id}: bad blood group {self.blood_group!r}")


DEATH_CAUSE_GROUPS = ("cva", "trauma", "anoxia", "other")


@dataclass(frozen=True)
class CandidateState:
    """Snapshot of one registration's dynamic state (used by scalar rules).

    The vectorized engine keeps the same information in arrays; this view is
    the readable reference form.
    """

    registration: CandidateRegistration
    urgency: str
    unacceptables: frozenset[str]
    profile: AllocationProfile | None
    mm_criteria: frozenset[tuple[int, int, int]]
    last_screening_date: date | None
    dialysis_start: date | None
    esp_extended_opt_in: bool
    german_program_choice: str | None
    vpra: float = 0.0

    @classmethod
    def initial(cls, reg: CandidateRegistration, vpra: float = 0.0) -> "CandidateState":
        return cls(
            registration=reg,
            urgency=reg.initial_urgency,
            unacceptables=reg.unacceptables,
            profile=reg.profile,
            mm_criteria=reg.mm_criteria,
            last_screening_date=reg.last_screening_date,
            dialysis_start=reg.dialysis_start,
            esp_extended_opt_in=reg.esp_extended_opt_in,
            german_program_choice=reg.german_program_choice,
            vpra=vpra,
        )

    def dialysis_days(self, now: date) -> int:
        if self.dialysis_start is None:
            return 0
        return max(0, (now - self.dialysis_start).days)

    def apply(self, update: StatusUpdate, **derived) -> "CandidateState":
        """Pure functional application of one status update."""
        kind, payload = update.kind, update.payload
        if kind == "URG":
            code = payload.strip()
            if code not in URGENCY_CODES:
                raise InputError(f"bad urgency payload {payload!r}")
            return replace(self, urgency=code)
        if kind == "PRF":
            return replace(self, profile=parse_profile(payload))
        if kind == "UNA":
            new = frozenset(payload.split())
            return replace(self, unacceptables=new,
                           vpra=derived.get("vpra", self.vpra))
        if kind == "MMC":
            return replace(self, mm_criteria=expand_mm_patterns(payload))
        if kind == "SCR":
            return replace(self, last_screening_date=update.when)
        if kind == "DIA":
            text = payload.strip()
            start = date.fromisoformat(text) if text else None
            return replace(self, dialysis_start=start)
        if kind == "CHO":
            choice = payload.strip().upper()
            if choice in ("ETKAS", "ESP"):
                return replace(self, german_program_choice=choice)
            if choice == "EXT_OPT_IN":
                return replace(self, esp_extended_opt_in=True)
            if choice == "EXT_OPT_OUT":
                return replace(self, esp_extended_opt_in=False)
            raise InputError(f"bad choice payload {payload!r}")
        raise InputError(f"unknown update kind {kind!r}")
