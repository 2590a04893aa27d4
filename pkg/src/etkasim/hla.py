"""HLA typings, mismatch counting, vPRA, and mismatch-probability formulas.

Mismatches on the A and B loci are counted at the broad-antigen level and
DR mismatches at the split level, so every typing is normalized through an
antigen equivalence table before any counting happens.  The same table
backs vPRA computation against a reference donor panel and the analytic
favorable-match probability used for mismatch probability points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .common import InputError, read_csv_rows, round_half_up

LOCI = ("A", "B", "DR")

#: Loci counted at broad resolution; every other locus counts at split level.
BROAD_LEVEL_LOCI = frozenset({"A", "B"})


class UnknownAntigenError(KeyError):
    """An antigen code that does not resolve in the equivalence table."""

    def __init__(self, code: str):
        self.code = code
        super().__init__(f"unknown antigen code: {code!r}")


@dataclass(frozen=True)
class Antigen:
    code: str
    locus: str
    broad: str  # parent broad; equals code when the code is itself a broad


class AntigenTable:
    """Broad/split equivalence table, loaded from data rather than code.

    Each row maps an antigen code to its locus and parent broad.  Broads are
    listed with themselves as parent.
    """

    def __init__(self, antigens: Iterable[Antigen]):
        self._by_code: dict[str, Antigen] = {}
        for a in antigens:
            if a.code in self._by_code:
                raise InputError(f"duplicate antigen code {a.code!r}")
            self._by_code[a.code] = a
        for a in self._by_code.values():
            parent = self._by_code.get(a.broad)
            if parent is None or parent.locus != a.locus:
                raise InputError(
                    f"antigen {a.code!r}: parent broad {a.broad!r} missing "
                    f"or on a different locus")

    @classmethod
    def from_file(cls, path: str | Path) -> "AntigenTable":
        rows = []
        for line, row in read_csv_rows(path):
            try:
                rows.append(Antigen(code=row["code"].strip(),
                                    locus=row["locus"].strip(),
                                    broad=row["broad"].strip() or row["code"].strip()))
            except KeyError as exc:
                raise InputError(f"missing column {exc}", path, line)
        return cls(rows)

    def resolve(self, code: str) -> Antigen:
        try:
            return self._by_code[code]
        except KeyError:
            raise UnknownAntigenError(code) from None

    def normalize(self, code: str) -> str:
        """Counting-level code: parent broad on A/B, the split itself on DR+."""
        a = self.resolve(code)
        return a.broad if a.locus in BROAD_LEVEL_LOCI else a.code

    def locus_of(self, code: str) -> str:
        return self.resolve(code).locus

    def codes(self) -> Iterable[str]:
        return self._by_code.keys()


@dataclass(frozen=True)
class HlaTyping:
    """Per-locus antigen sets; 1 antigen at a locus means homozygous.

    ``antigens`` maps locus -> tuple of raw codes (length 1 or 2).  Loci
    beyond A/B/DR may be present and ride along behind the same interface.
    """

    antigens: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "antigens",
            {loc: tuple(codes) for loc, codes in self.antigens.items()})
        for loc, codes in self.antigens.items():
            if not 1 <= len(codes) <= 2:
                raise ValueError(
                    f"locus {loc}: expected 1-2 antigens, got {len(codes)}")

    @classmethod
    def from_codes(cls, table: AntigenTable, codes: Iterable[str]) -> "HlaTyping":
        by_locus: dict[str, list[str]] = {}
        for code in codes:
            by_locus.setdefault(table.locus_of(code), []).append(code)
        return cls({loc: tuple(v) for loc, v in by_locus.items()})

    def validate(self, table: AntigenTable, loci: Sequence[str] = LOCI) -> None:
        for loc in loci:
            if loc not in self.antigens:
                raise ValueError(f"typing lacks locus {loc}")
            for code in self.antigens[loc]:
                got = table.locus_of(code)
                if got != loc:
                    raise InputError(
                        f"antigen {code!r} is on locus {got}, listed under {loc}")

    def normalized(self, table: AntigenTable, locus: str) -> frozenset[str]:
        """Counting-level antigen set at a locus."""
        return frozenset(table.normalize(c) for c in self.antigens[locus])

    def is_homozygous(self, locus: str) -> bool:
        return len(set(self.antigens.get(locus, ()))) == 1

    def all_codes(self) -> frozenset[str]:
        return frozenset(c for codes in self.antigens.values() for c in codes)


@dataclass(frozen=True)
class MismatchCount:
    mm_a: int
    mm_b: int
    mm_dr: int

    @property
    def total(self) -> int:
        return self.mm_a + self.mm_b + self.mm_dr

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.mm_a, self.mm_b, self.mm_dr)


def count_mismatches_at(table: AntigenTable, donor: HlaTyping,
                        candidate: HlaTyping, locus: str) -> int:
    """Donor antigens at `locus` (normalized) absent from the candidate's set.

    A homozygous donor contributes its single antigen once, so counts are
    always 0, 1, or 2.
    """
    donor_set = donor.normalized(table, locus)
    cand_set = candidate.normalized(table, locus)
    return len(donor_set - cand_set)


def count_mismatches(table: AntigenTable, donor: HlaTyping,
                     candidate: HlaTyping,
                     loci: Sequence[str] = LOCI) -> MismatchCount:
    counts = {loc: count_mismatches_at(table, donor, candidate, loc)
              for loc in loci}
    return MismatchCount(counts.get("A", 0), counts.get("B", 0),
                         counts.get("DR", 0))


def homozygosity_level(candidate: HlaTyping) -> tuple[int, dict[str, bool]]:
    """Number of A/B/DR loci with a single antigen, plus per-locus flags."""
    flags = {loc: candidate.is_homozygous(loc) for loc in LOCI}
    return sum(flags.values()), flags


# ---------------------------------------------------------------------------
# Donor panel and vPRA

class DonorPanel:
    """Immutable reference population of donor typings.

    The production panel holds 10,000 recently reported donors; any size
    works, and test fixtures use much smaller ones.
    """

    def __init__(self, typings: Sequence[HlaTyping], table: AntigenTable | None = None):
        if not typings:
            raise ValueError("donor panel must be nonempty")
        self._typings = tuple(typings)
        if table is not None:
            self._carried_sets = tuple(carried_codes(table, t)
                                       for t in self._typings)
        else:
            self._carried_sets = tuple(t.all_codes() for t in self._typings)

    def __len__(self) -> int:
        return len(self._typings)

    def __iter__(self):
        return iter(self._typings)

    @classmethod
    def from_file(cls, table: AntigenTable, path: str | Path) -> "DonorPanel":
        """Load a panel file with columns a1,a2,b1,b2,dr1,dr2.

        A blank second field means the donor is homozygous at that locus.
        """
        typings = []
        for line, row in read_csv_rows(path):
            codes = []
            for col in ("a1", "a2", "b1", "b2", "dr1", "dr2"):
                value = row.get(col, "").strip()
                if value:
                    codes.append(value)
            typing = HlaTyping.from_codes(table, codes)
            typing.validate(table)
            typings.append(typing)
        return cls(typings, table)


def carried_codes(table: AntigenTable, typing: HlaTyping) -> frozenset[str]:
    """Antigen codes a donor effectively carries: the typed codes plus their
    parent broads, so an unacceptable broad also blocks donors typed at the
    split level."""
    codes = set(typing.all_codes())
    for code in tuple(codes):
        codes.add(table.resolve(code).broad)
    return frozenset(codes)


def compute_vpra(unacceptables: frozenset[str] | set[str],
                 panel: DonorPanel) -> float:
    """Fraction of panel donors carrying at least one unacceptable antigen."""
    if not unacceptables:
        return 0.0
    unacc = frozenset(unacceptables)
    hits = sum(1 for codes in panel._carried_sets if codes & unacc)
    return hits / len(panel)


def p_leq1mm_empirical(table: AntigenTable, candidate: HlaTyping,
                       unacceptables: frozenset[str], panel: DonorPanel,
                       exclude_unacceptable_carriers: bool = False) -> float:
    """Fraction of panel donors with at most 1 HLA-ABDR mismatch.

    With ``exclude_unacceptable_carriers`` the fraction is taken among the
    whole panel but donors carrying any unacceptable antigen never count as
    favorable, which can only lower the value.
    """
    hits = 0
    for typing, codes in zip(panel, panel._carried_sets):
        if exclude_unacceptable_carriers and unacceptables and codes & unacceptables:
            continue
        if count_mismatches(table, typing, candidate).total <= 1:
            hits += 1
    return hits / len(panel)


# ---------------------------------------------------------------------------
# Analytic favorable-match probability

class FrequencyTable:
    """Antigen frequencies per locus, the basis of the analytic p<=1mm.

    Frequencies are interpreted as relative weights per locus and normalized
    to a distribution, under which donor genotypes are drawn as two
    independent antigens per locus.
    """

    def __init__(self, freqs: Mapping[str, Mapping[str, float]]):
        self._freqs: dict[str, dict[str, float]] = {}
        for locus, table in freqs.items():
            total = sum(table.values())
            if total <= 0:
                raise InputError(f"locus {locus}: frequencies sum to {total}")
            self._freqs[locus] = {c: f / total for c, f in table.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "FrequencyTable":
        freqs: dict[str, dict[str, float]] = {}
        for line, row in read_csv_rows(path):
            locus = row["locus"].strip()
            code = row["code"].strip()
            try:
                f = float(row["freq"])
            except ValueError:
                raise InputError(f"invalid frequency {row['freq']!r}", path, line)
            if f < 0:
                raise InputError(f"negative frequency for {code}", path, line)
            freqs.setdefault(locus, {})[code] = f
        return cls(freqs)

    def locus(self, locus: str) -> dict[str, float]:
        return self._freqs[locus]

    def freq_of(self, locus: str, code: str) -> float:
        try:
            return self._freqs[locus][code]
        except KeyError:
            raise InputError(
                f"antigen {code!r} missing from frequency table at locus {locus}")

    def sample_codes(self, locus: str, rng, k: int = 2) -> list[str]:
        codes = sorted(self._freqs[locus])
        weights = [self._freqs[locus][c] for c in codes]
        return list(rng.choice(codes, size=k, p=weights))


def _locus_mismatch_probs(table: AntigenTable, freq: FrequencyTable,
                          candidate: HlaTyping, locus: str) -> tuple[float, float]:
    """(P[0 mismatches], P[exactly 1]) at a locus for a random donor.

    The donor genotype is two independent draws from the locus frequencies;
    a homozygous draw contributes its antigen once.  Candidate antigens must
    all be present in the table (their frequencies define the favorable set).
    """
    cand = candidate.normalized(table, locus)
    dist = freq.locus(locus)
    for code in candidate.antigens[locus]:
        norm = table.normalize(code)
        if norm not in dist:
            raise InputError(
                f"candidate antigen {code!r} (counted as {norm!r}) missing "
                f"from frequency table at locus {locus}")
    s = sum(f for c, f in dist.items() if c in cand)
    sq_out = sum(f * f for c, f in dist.items() if c not in cand)
    p0 = s * s
    p1 = 2.0 * s * (1.0 - s) + sq_out
    return p0, p1


def p_leq1mm_analytic(table: AntigenTable, candidate: HlaTyping,
                      freq: FrequencyTable,
                      loci: Sequence[str] = LOCI) -> float:
    """Probability of at most 1 total mismatch under locus independence.

    Sum of the zero-total-mismatch probability and, per locus, the
    probability of exactly one mismatch there and zero elsewhere.
    """
    probs = [_locus_mismatch_probs(table, freq, candidate, loc) for loc in loci]
    p_all0 = math.prod(p0 for p0, _ in probs)
    p_exactly1 = 0.0
    for i, (p0_i, p1_i) in enumerate(probs):
        term = p1_i
        for j, (p0_j, _) in enumerate(probs):
            if j != i:
                term *= p0_j
        p_exactly1 += term
    return p_all0 + p_exactly1


# ---------------------------------------------------------------------------
# Mismatch probability (MMP) and its HLA-only variant (HMPP)

@dataclass(frozen=True)
class MmpInputs:
    """Inputs to the mismatch-probability formula, all fractions in [0,1]."""

    f_bg: float
    vpra: float
    p_leq1mm: float

    def __post_init__(self):
        for name in ("f_bg", "vpra", "p_leq1mm"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")


def compute_mmp(inputs: MmpInputs) -> float:
    """Probability that none of the next 1,000 donors is favorably matched.

    A favorable donor is blood-group identical, carries no unacceptable
    antigen, and has at most 1 ABDR mismatch, so per-donor favorability is
    f_bg * (1 - vPRA) * p_leq1mm and the MMP is the 1,000-donor complement.
    Evaluated in the log domain for precision.
    """
    x = inputs.f_bg * (1.0 - inputs.vpra) * inputs.p_leq1mm
    if x >= 1.0:
        return 0.0
    value = math.exp(1000.0 * math.log1p(-x))
    return min(1.0, max(0.0, value))


def compute_hmpp_fraction(f_leq1mm: float) -> float:
    """HLA-only mismatch probability: [1 - f_leq1mm]^1000, in [0,1]."""
    if not 0.0 <= f_leq1mm <= 1.0:
        raise ValueError(f"f_leq1mm = {f_leq1mm} outside [0, 1]")
    if f_leq1mm >= 1.0:
        return 0.0
    value = math.exp(1000.0 * math.log1p(-f_leq1mm))
    return min(1.0, max(0.0, value))


def mmp_points(mmp: float, weight: float) -> int:
    """Match points for a mismatch probability: round(weight * MMP), half-up."""
    return round_half_up(weight * mmp)


# ---------------------------------------------------------------------------
# Blood groups

BLOOD_GROUPS = ("O", "A", "B", "AB")


@dataclass(frozen=True)
class BloodGroupFrequencies:
    freqs: Mapping[str, float] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "BloodGroupFrequencies":
        freqs = {}
        for line, row in read_csv_rows(path):
            bg = row["bg"].strip()
            if bg not in BLOOD_GROUPS:
                raise InputError(f"unknown blood group {bg!r}", path, line)
            freqs[bg] = float(row["freq"])
        return cls(freqs)

    def freq_of(self, bg: str) -> float:
        try:
            return self.freqs[bg]
        except KeyError:
            raise InputError(f"no frequency for blood group {bg!r}")
