"""Post-transplant outcomes: failure times, re-listing, and synthetic
repeat registrations.

Each transplantation gets a failure time t (death or re-transplantation,
whichever would come first) drawn from a Weibull model, and potentially a
re-listing time r < t drawn from empirical step curves over the ratio r/t.
Recipients who re-list inside the simulation window get a synthetic
re-listing: their own static attributes combined with the urgency-status
stream of a similar historical repeat registration.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .common import InputError, read_csv_header_meta, read_csv_rows
from .hla import AntigenTable, HlaTyping

log = logging.getLogger(__name__)


class InvalidScaleError(ValueError):
    """The Weibull linear scale came out non-positive for these covariates."""


@dataclass(frozen=True)
class WeibullModel:
    """Accelerated failure time model with per-country shape parameters.

    The scale is the linear combination of covariates (lambda = beta'x,
    which must be positive), and S(t|x) = exp(-(t/lambda)^k).
    """

    coefficients: Mapping[str, float]
    shape_by_country: Mapping[str, float]
    intercept: float = 0.0
    default_shape: float = 1.0
    model_id: str = "post_transplant"

    def scale(self, features: Mapping[str, float]) -> float:
        lam = self.intercept
        for name, beta in self.coefficients.items():
            if name not in features:
                raise InputError(f"model {self.model_id!r} needs feature "
                                 f"{name!r}")
            lam += beta * features[name]
        return lam

    def shape(self, country: str) -> float:
        return self.shape_by_country.get(country, self.default_shape)

    @classmethod
    def from_file(cls, path: str | Path) -> "WeibullModel":
        meta = read_csv_header_meta(path)
        coefs: dict[str, float] = {}
        shapes: dict[str, float] = {}
        intercept = 0.0
        default_shape = 1.0
        for line, row in read_csv_rows(path):
            kind = row["kind"].strip()
            name = row["name"].strip()
            value = float(row["value"])
            if kind == "coef":
                if name in ("(Intercept)", "intercept"):
                    intercept = value
                else:
                    coefs[name] = value
            elif kind == "shape":
                if name == "default":
                    default_shape = value
                else:
                    shapes[name] = value
            else:
                raise InputError(f"unknown row kind {kind!r}", path, line)
        return cls(coefficients=coefs, shape_by_country=shapes,
                   intercept=intercept, default_shape=default_shape,
                   model_id=meta.get("model_id", Path(path).stem))


def sample_failure_time(features: Mapping[str, float], country: str,
                        model: WeibullModel, rng) -> float:
    """Inverse-transform draw: t = lambda * (-log u)^(1/k), in days."""
    lam = model.scale(features)
    if lam <= 0:
        raise InvalidScaleError(
            f"non-positive Weibull scale {lam!r}; coefficients and covariates "
            "are inconsistent")
    k = model.shape(country)
    u = float(rng.random())
    if u <= 0.0:
        u = np.nextafter(0.0, 1.0)
    return lam * (-math.log(u)) ** (1.0 / k)


# ---------------------------------------------------------------------------
# Re-listing time from stratified step curves

TIME_BUCKETS = ("lt180d", "180d_1y", "1y_2y", "2y_5y", "ge5y")
AGE_BUCKETS = ("0-17", "18-39", "40-49", "50-54", "55-59", "60-64",
               "65-69", "70-74", "75+")


def time_bucket(t_days: float) -> str:
    if t_days < 180:
        return "lt180d"
    if t_days < 365.25:
        return "180d_1y"
    if t_days < 2 * 365.25:
        return "1y_2y"
    if t_days < 5 * 365.25:
        return "2y_5y"
    return "ge5y"


def age_bucket(age: float) -> str:
    bounds = ((18, "0-17"), (40, "18-39"), (50, "40-49"), (55, "50-54"),
              (60, "55-59"), (65, "60-64"), (70, "65-69"), (75, "70-74"))
    for upper, label in bounds:
        if age < upper:
            return label
    return "75+"


@dataclass(frozen=True)
class StepCurve:
    """Survival-style step curve over the ratio s = r/t on [0, 1].

    ``survival[i]`` is P[R/T > s] just after the jump at ``grid[i]``; the
    curve starts at 1 before the first jump and its terminal plateau is the
    probability of dying without re-listing.
    """

    grid: tuple[float, ...]
    survival: tuple[float, ...]

    def __post_init__(self):
        if len(self.grid) != len(self.survival) or not self.grid:
            raise ValueError("step curve needs matching grids")
        if any(not 0.0 <= s <= 1.0 for s in self.grid):
            raise ValueError("curve domain is [0, 1]")
        if any(b > a + 1e-12 for a, b in zip(self.survival, self.survival[1:])):
            raise ValueError("survival must be non-increasing")

    def crossing(self, u: float) -> float | None:
        """First grid point where the cumulative jump mass reaches u.

        None when the curve never accumulates that much mass, i.e. the draw
        lands in the never-relists plateau.
        """
        cdf = [1.0 - s for s in self.survival]
        idx = bisect_left(cdf, u)
        if idx >= len(cdf):
            return None
        return self.grid[idx]


class RelistCurveSet:
    """Step curves stratified by time-to-event and age at transplantation."""

    def __init__(self, curves: Mapping[tuple[str, str], StepCurve]):
        self._curves = dict(curves)

    def curve(self, t_days: float, age: float) -> StepCurve:
        key = (time_bucket(t_days), age_bucket(age))
        try:
            return self._curves[key]
        except KeyError:
            raise InputError(f"no re-listing curve for stratum {key}") from None

    @classmethod
    def from_file(cls, path: str | Path) -> "RelistCurveSet":
        raw: dict[tuple[str, str], list[tuple[float, float]]] = {}
        for line, row in read_csv_rows(path):
            tb = row["t_bucket"].strip()
            ab = row["age_bucket"].strip()
            if tb not in TIME_BUCKETS:
                raise InputError(f"unknown time bucket {tb!r}", path, line)
            if ab not in AGE_BUCKETS:
                raise InputError(f"unknown age bucket {ab!r}", path, line)
            raw.setdefault((tb, ab), []).append(
                (float(row["s"]), float(row["survival"])))
        curves = {}
        for key, pairs in raw.items():
            pairs.sort()
            curves[key] = StepCurve(grid=tuple(s for s, _ in pairs),
                                    survival=tuple(v for _, v in pairs))
        return cls(curves)


def sample_relist_time(t_days: float, age: float, curves: RelistCurveSet,
                       rng) -> float | None:
    """Re-listing time in days, or None for death without re-listing.

    Inverse transform on the stratum's r/t curve: draw u, take the first
    grid ratio s whose cumulative probability reaches u, and scale by t.
    The ratio grid lives strictly below 1, so r < t whenever r exists.
    """
    if t_days <= 0:
        raise ValueError("failure time must be positive")
    curve = curves.curve(t_days, age)
    u = float(rng.random())
    s = curve.crossing(u)
    if s is None or s >= 1.0:
        return None
    return s * t_days


# ---------------------------------------------------------------------------
# De novo immunization

def simulate_de_novo_immunization(table: AntigenTable, donor: HlaTyping,
                                  candidate: HlaTyping, p: float,
                                  rng) -> frozenset[str]:
    """Mismatched donor antigens that become unacceptable, each with
    probability p (default policy: 0.20), independently per antigen."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"immunization probability {p} outside [0, 1]")
    additions = []
    for locus in ("A", "B", "DR"):
        mismatched = sorted(donor.normalized(table, locus)
                            - candidate.normalized(table, locus))
        for code in mismatched:
            if float(rng.random()) < p:
                additions.append(code)
    return frozenset(additions)


# ---------------------------------------------------------------------------
# Synthetic re-listings

@dataclass(frozen=True)
class PoolEntry:
    """One historical repeat registration available for matching."""

    id: str
    country: str
    age_at_relist: float
    dialysis_days_at_relist: int
    relisted_within_1y: bool
    r_days: float
    t_days: float
    #: urgency statuses as (offset days from re-listing, urgency code)
    status_updates: tuple[tuple[int, str], ...]

    def __post_init__(self):
        if not self.status_updates:
            raise ValueError(f"pool entry {self.id}: empty status stream")
        if self.status_updates[-1][1] not in ("R", "D"):
            raise ValueError(f"pool entry {self.id}: status stream must end "
                             "in R or D")


class RelistingPool:
    def __init__(self, entries: Sequence[PoolEntry]):
        self.entries = tuple(entries)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_files(cls, entries_path: str | Path,
                   updates_path: str | Path) -> "RelistingPool":
        updates: dict[str, list[tuple[int, str]]] = {}
        for line, row in read_csv_rows(updates_path):
            updates.setdefault(row["pool_id"].strip(), []).append(
                (int(row["offset_days"]), row["status"].strip()))
        entries = []
        for line, row in read_csv_rows(entries_path):
            pool_id = row["id"].strip()
            stream = sorted(updates.get(pool_id, []))
            try:
                entries.append(PoolEntry(
                    id=pool_id,
                    country=row["country"].strip(),
                    age_at_relist=float(row["age_at_relist"]),
                    dialysis_days_at_relist=int(row["dialysis_days"]),
                    relisted_within_1y=row["within_1y"].strip() == "1",
                    r_days=float(row["r_days"]),
                    t_days=float(row["t_days"]),
                    status_updates=tuple(stream)))
            except ValueError as exc:
                raise InputError(str(exc), entries_path, line)
        return cls(entries)


# caliper widths for pool matching, in days where applicable
CALIPER_AGE_YEARS = 20.0
CALIPER_R_DAYS = 2 * 365.25
CALIPER_T_DAYS = 1 * 365.25
CALIPER_DIALYSIS_DAYS = 3 * 365.25
MIN_MATCHES = 5
NEAREST_M = 5


@dataclass(frozen=True)
class RecipientProfile:
    """What the pool matcher needs to know about a fresh transplant."""

    country: str
    age_at_relist: float
    dialysis_days_at_relist: int
    r_days: float
    t_days: float

    @property
    def relisted_within_1y(self) -> bool:
        return self.r_days <= 365.25


def _within_calipers(profile: RecipientProfile, entry: PoolEntry) -> bool:
    return (abs(entry.age_at_relist - profile.age_at_relist) <= CALIPER_AGE_YEARS
            and abs(entry.r_days - profile.r_days) <= CALIPER_R_DAYS
            and abs(entry.t_days - profile.t_days) <= CALIPER_T_DAYS
            and abs(entry.dialysis_days_at_relist
                    - profile.dialysis_days_at_relist) <= CALIPER_DIALYSIS_DAYS)


def _candidate_matches(profile: RecipientProfile,
                       pool: RelistingPool) -> list[PoolEntry]:
    """In-caliper matches, relaxing country and then the within-1-year flag
    whenever fewer than MIN_MATCHES entries survive."""
    def select(require_country: bool, require_flag: bool) -> list[PoolEntry]:
        out = []
        for entry in pool.entries:
            if require_country and entry.country != profile.country:
                continue
            if require_flag and (entry.relisted_within_1y
                                 != profile.relisted_within_1y):
                continue
            if _within_calipers(profile, entry):
                out.append(entry)
        return out

    for require_country, require_flag in ((True, True), (False, True),
                                          (False, False)):
        matches = select(require_country, require_flag)
        if len(matches) >= MIN_MATCHES:
            return matches
    return matches  # may be short or empty after full relaxation


def mahalanobis_top_m(profile: RecipientProfile, matches: Sequence[PoolEntry],
                      m: int = NEAREST_M) -> list[PoolEntry]:
    """The m entries closest to (r, t) in Mahalanobis distance.

    The covariance comes from the match set itself; with fewer than two
    matches (or a degenerate covariance) distances fall back to Euclidean on
    per-axis standardized values.
    """
    if not matches:
        return []
    pts = np.array([[e.r_days, e.t_days] for e in matches], dtype=float)
    target = np.array([profile.r_days, profile.t_days], dtype=float)
    if len(matches) >= 2:
        cov = np.cov(pts.T)
        try:
            inv = np.linalg.inv(cov)
            diffs = pts - target
            d2 = np.einsum("ij,jk,ik->i", diffs, inv, diffs)
        except np.linalg.LinAlgError:
            d2 = None
    else:
        d2 = None
    if d2 is None or not np.all(np.isfinite(d2)):
        scale = pts.std(axis=0)
        scale[scale == 0] = 1.0
        diffs = (pts - target) / scale
        d2 = (diffs ** 2).sum(axis=1)
    order = sorted(range(len(matches)), key=lambda i: (d2[i], matches[i].id))
    return [matches[i] for i in order[:m]]


def select_pool_match(profile: RecipientProfile, pool: RelistingPool,
                      rng) -> PoolEntry | None:
    """Pick one pool entry: caliper match, m nearest by Mahalanobis on
    (r, t), then a uniform draw among them.  None when nothing matches even
    after full caliper relaxation."""
    matches = _candidate_matches(profile, pool)
    if not matches:
        log.info("no pool match for re-listing (country=%s, r=%.0fd, t=%.0fd)",
                 profile.country, profile.r_days, profile.t_days)
        return None
    top = mahalanobis_top_m(profile, matches)
    idx = int(rng.integers(0, len(top)))
    return top[idx]


def build_synthetic_relisting(recipient, current_unacceptables: frozenset[str],
                              transplant_date, t_days: float, r_days: float,
                              donor_hla: HlaTyping, pool: RelistingPool,
                              table: AntigenTable, immunization_p: float,
                              rng, new_id: str):
    """Combine the recipient's static data with a matched pool entry's
    urgency stream into a repeat registration.

    The recipient keeps their HLA, blood group, country, and center; the
    unacceptable set grows by simulated de novo immunization against the
    mismatched donor antigens; the initial dialysis time at re-listing comes
    from the matched entry, as does the urgency-status stream (and nothing
    else).  Returns (registration, matched entry) or None when no pool entry
    survives caliper matching.

    Imported lazily to avoid a module cycle with entities.
    """
    from datetime import timedelta

    from .entities import CandidateRegistration

    relist_date = transplant_date + timedelta(days=int(round(r_days)))
    age_at_relist = ((relist_date - recipient.date_of_birth).days / 365.25)
    profile = RecipientProfile(
        country=recipient.country,
        age_at_relist=float(int(age_at_relist)),
        dialysis_days_at_relist=(
            max(0, (transplant_date - recipient.dialysis_start).days)
            if recipient.dialysis_start else 0),
        r_days=float(r_days),
        t_days=float(t_days))
    match = select_pool_match(profile, pool, rng)
    if match is None:
        return None
    additions = simulate_de_novo_immunization(
        table, donor_hla, recipient.hla, immunization_p, rng)
    registration = CandidateRegistration(
        id=new_id,
        patient_id=recipient.patient_id,
        country=recipient.country,
        center=recipient.center,
        blood_group=recipient.blood_group,
        date_of_birth=recipient.date_of_birth,
        registration_date=relist_date,
        hla=recipient.hla,
        unacceptables=frozenset(current_unacceptables) | additions,
        dialysis_start=relist_date - timedelta(
            days=match.dialysis_days_at_relist),
        prior_transplant=True,
        initial_urgency="NT",
    )
    return registration, match
