"""Lesion data model, synthetic cohort generation, and patient-level splitting.

Default generator parameters follow the published cohort characteristics
(393 Spitz tumors, 379 conventional melanomas).
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

import numpy as np

from . import ConfigError


class Lineage(str, Enum):
    SPITZ = "SPITZ"
    CONVENTIONAL_MELANOMA = "CONVENTIONALMELANOMA"


class AberrationClass(str, Enum):
    ALK = "ALK"
    ROS1 = "ROS1"
    NTRK = "NTRK"
    OTHER = "OTHER"


class DiagnosticCategory(str, Enum):
    BENIGN = "BENIGN"
    INTERMEDIATE = "INTERMEDIATE"
    MALIGNANT = "MALIGNANT"


class Sex(str, Enum):
    MALE = "MALE"
    FEMALE = "FEMALE"


class Location(str, Enum):
    HEAD_NECK = "HEADNECK"
    TRUNK = "TRUNK"
    UPPER_EXTREMITIES = "UPPEREXTREMITIES"
    LOWER_EXTREMITIES = "LOWEREXTREMITIES"
    HANDS_FEET = "HANDSFEET"
    UNKNOWN = "UNKNOWN"


class SlideKind(str, Enum):
    INTERNAL = "INTERNAL"
    CONSULTATION = "CONSULTATION"


ABERRATIONS = list(AberrationClass)
CATEGORIES = list(DiagnosticCategory)

AGE_MIN, AGE_MAX = 1, 85


# Raw genetic-aberration labels of Spitz tumors and their classification group.
_ABERRATION_GROUPS = {
    "alk fusion": AberrationClass.ALK,
    "ros1 fusion": AberrationClass.ROS1,
    "ntrk fusion": AberrationClass.NTRK,
    "ntrk1 fusion": AberrationClass.NTRK,
    "ntrk2 fusion": AberrationClass.NTRK,
    "ntrk3 fusion": AberrationClass.NTRK,
    "ntrk unknown fusion": AberrationClass.NTRK,
    "hras mutation": AberrationClass.OTHER,
    "ros1 mutation": AberrationClass.OTHER,
    "map3k8 fusion": AberrationClass.OTHER,
    "braf fusion": AberrationClass.OTHER,
    "ret fusion": AberrationClass.OTHER,
    "met fusion": AberrationClass.OTHER,
    "rasgrf1 fusion": AberrationClass.OTHER,
}
# spelling used in the source table
_ABERRATION_ALIASES = {"rasgfr1 fusion": "rasgrf1 fusion"}
_MELANOMA_ONLY = {"braf mutation", "nras mutation", "braf & nras mutation"}

SPITZ_ABERRATION_LABELS = tuple(sorted(_ABERRATION_GROUPS))

_CATEGORY_GROUPS = {
    "benign": DiagnosticCategory.BENIGN,
    "benign/intermediate": DiagnosticCategory.INTERMEDIATE,
    "intermediate": DiagnosticCategory.INTERMEDIATE,
    "intermediate/malignant": DiagnosticCategory.MALIGNANT,
    "malignant": DiagnosticCategory.MALIGNANT,
}


def _norm_label(raw: str) -> str:
    return " ".join(str(raw).lower().replace(" / ", "/").split())


def group_aberration(raw: str) -> AberrationClass:
    """Map a raw Spitz genetic-aberration label to its classification group."""
    key = _norm_label(raw)
    key = _ABERRATION_ALIASES.get(key, key)
    if key in _MELANOMA_ONLY:
        raise ConfigError(
            f"{raw!r} is a conventional-melanoma aberration, not a Spitz label"
        )
    try:
        return _ABERRATION_GROUPS[key]
    except KeyError:
        accepted = ", ".join(SPITZ_ABERRATION_LABELS)
        raise ConfigError(f"unknown aberration label {raw!r}; accepted: {accepted}") from None


def group_category(raw: str) -> DiagnosticCategory:
    """Collapse the 5-level diagnostic category; borderline labels go up."""
    try:
        return _CATEGORY_GROUPS[_norm_label(raw)]
    except KeyError:
        accepted = ", ".join(_CATEGORY_GROUPS)
        raise ConfigError(f"unknown diagnostic category {raw!r}; accepted: {accepted}") from None


@dataclass(frozen=True)
class ClinicalFeatures:
    age: int
    sex: Sex
    location: Location

    def __post_init__(self):
        if not AGE_MIN <= self.age <= AGE_MAX:
            raise ConfigError(f"age {self.age} outside [{AGE_MIN}, {AGE_MAX}]", "age")
        object.__setattr__(self, "sex", Sex(self.sex))
        object.__setattr__(self, "location", Location(self.location))


@dataclass(frozen=True)
class LesionCase:
    case_id: str
    patient_id: str
    lineage: Lineage
    aberration: AberrationClass | None
    category: DiagnosticCategory
    clinical: ClinicalFeatures
    bag_refs: Mapping[SlideKind, str]

    def __post_init__(self):
        object.__setattr__(self, "lineage", Lineage(self.lineage))
        object.__setattr__(self, "category", DiagnosticCategory(self.category))
        if self.aberration is not None:
            object.__setattr__(self, "aberration", AberrationClass(self.aberration))
        if (self.aberration is not None) != (self.lineage is Lineage.SPITZ):
            raise ConfigError(
                f"case {self.case_id}: aberration must be set iff lineage is SPITZ",
                "aberration",
            )
        if (
            self.lineage is Lineage.CONVENTIONAL_MELANOMA
            and self.category is not DiagnosticCategory.MALIGNANT
        ):
            raise ConfigError(f"case {self.case_id}: melanoma must be MALIGNANT", "category")
        if not self.bag_refs:
            raise ConfigError(f"case {self.case_id}: no bag references", "bag_refs")
        refs = {SlideKind(k): v for k, v in self.bag_refs.items()}
        object.__setattr__(self, "bag_refs", refs)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "patient_id": self.patient_id,
            "lineage": self.lineage.value,
            "aberration": None if self.aberration is None else self.aberration.value,
            "category": self.category.value,
            "clinical": {
                "age": self.clinical.age,
                "sex": self.clinical.sex.value,
                "location": self.clinical.location.value,
            },
            "bag_refs": {k.value: v for k, v in sorted(self.bag_refs.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> LesionCase:
        try:
            return cls(
                case_id=d["case_id"],
                patient_id=d["patient_id"],
                lineage=Lineage(d["lineage"]),
                aberration=None if d.get("aberration") is None else AberrationClass(d["aberration"]),
                category=DiagnosticCategory(d["category"]),
                clinical=ClinicalFeatures(**d["clinical"]),
                bag_refs={SlideKind(k): v for k, v in d["bag_refs"].items()},
            )
        except KeyError as e:
            raise ConfigError(f"case record missing field {e.args[0]!r}", e.args[0]) from None
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad case record: {e}") from None


def dumps_cohort(cases: Iterable[LesionCase]) -> str:
    return "".join(json.dumps(c.to_dict(), separators=(",", ":")) + "\n" for c in cases)


def loads_cohort(text: str) -> list[LesionCase]:
    return [LesionCase.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


# --------------------------------------------------------------------------
# Generator spec


def triangular_mode_for_median(lo: float, hi: float, median: float) -> float:
    """Mode of the triangular distribution on [lo, hi] with the given median."""
    if not lo < median < hi:
        raise ConfigError(f"median {median} outside ({lo}, {hi})")
    width = hi - lo
    if median >= lo + width / 2:
        mode = lo + 2 * (median - lo) ** 2 / width
    else:
        mode = hi - 2 * (hi - median) ** 2 / width
    return min(max(mode, lo), hi)


@dataclass
class ClinicalDistribution:
    """Per-lineage clinical feature marginals (sampled independently)."""

    sex_probs: dict[str, float]
    location_probs: dict[str, float]
    age_min: float
    age_max: float
    age_median: float
    # (both, internal only, consultation only)
    slide_probs: dict[str, float]

    @property
    def age_mode(self) -> float:
        return triangular_mode_for_median(self.age_min, self.age_max, self.age_median)


def _ratios(counts: Mapping[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}


SPITZ_CLINICAL = ClinicalDistribution(
    sex_probs=_ratios({"MALE": 118, "FEMALE": 275}),
    location_probs=_ratios(
        {"HEADNECK": 32, "TRUNK": 73, "UPPEREXTREMITIES": 66,
         "LOWEREXTREMITIES": 197, "HANDSFEET": 23, "UNKNOWN": 2}
    ),
    age_min=1, age_max=73, age_median=27,
    slide_probs=_ratios({"BOTH": 264, "INTERNAL": 102, "CONSULTATION": 27}),
)

MELANOMA_CLINICAL = ClinicalDistribution(
    sex_probs=_ratios({"MALE": 158, "FEMALE": 221}),
    location_probs=_ratios(
        {"HEADNECK": 56, "TRUNK": 154, "UPPEREXTREMITIES": 55,
         "LOWEREXTREMITIES": 94, "HANDSFEET": 13, "UNKNOWN": 7}
    ),
    age_min=3, age_max=85, age_median=48,
    slide_probs=_ratios({"BOTH": 220, "INTERNAL": 117, "CONSULTATION": 42}),
)

# Grouped Spitz aberration prevalences; rounding residue assigned to OTHER.
REFERENCE_ABERRATION_PROBS = {"ALK": 0.150, "ROS1": 0.273, "NTRK": 0.282, "OTHER": 0.295}

# Spitz diagnostic categories after grouping borderline labels upward.
REFERENCE_CATEGORY_PROBS = _ratios({"BENIGN": 209, "INTERMEDIATE": 37 + 95, "MALIGNANT": 17 + 35})

REFERENCE_SPITZ_FRACTION = 393 / 772

_SLIDE_OPTIONS = ("BOTH", "INTERNAL", "CONSULTATION")


def _check_probs(probs: Mapping[str, float], keys: Iterable[str], name: str) -> np.ndarray:
    keys = list(keys)
    if set(probs) != set(keys):
        raise ConfigError(f"{name} must have exactly the keys {keys}, got {sorted(probs)}", name)
    vec = np.array([float(probs[k]) for k in keys])
    if not np.all(np.isfinite(vec)) or np.any(vec < 0):
        raise ConfigError(f"{name} has negative or non-finite entries", name)
    if abs(vec.sum() - 1.0) > 1e-9:
        raise ConfigError(f"{name} sums to {vec.sum():.12g}, expected 1", name)
    return vec


@dataclass
class CohortSpec:
    n_cases: int
    aberration_probs: dict[str, float] = field(default_factory=lambda: dict(REFERENCE_ABERRATION_PROBS))
    lineage_ratio: float = REFERENCE_SPITZ_FRACTION
    category_probs_by_aberration: dict[str, dict[str, float]] = field(
        default_factory=lambda: {a.value: dict(REFERENCE_CATEGORY_PROBS) for a in ABERRATIONS}
    )
    spitz_clinical: ClinicalDistribution = field(default_factory=lambda: SPITZ_CLINICAL)
    melanoma_clinical: ClinicalDistribution = field(default_factory=lambda: MELANOMA_CLINICAL)
    lesions_per_patient: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not isinstance(self.n_cases, int) or self.n_cases < 1:
            raise ConfigError(f"n_cases must be an integer >= 1, got {self.n_cases!r}", "n_cases")
        if not 0.0 <= self.lineage_ratio <= 1.0:
            raise ConfigError("lineage_ratio must lie in [0, 1]", "lineage_ratio")
        if self.lesions_per_patient < 1:
            raise ConfigError("lesions_per_patient must be >= 1", "lesions_per_patient")
        _check_probs(self.aberration_probs, [a.value for a in ABERRATIONS], "aberration_probs")
        if set(self.category_probs_by_aberration) != {a.value for a in ABERRATIONS}:
            raise ConfigError(
                "category_probs_by_aberration needs one row per aberration class",
                "category_probs_by_aberration",
            )
        for ab, row in self.category_probs_by_aberration.items():
            _check_probs(row, [c.value for c in CATEGORIES], f"category_probs_by_aberration.{ab}")
        for name in ("spitz_clinical", "melanoma_clinical"):
            dist = getattr(self, name)
            _check_probs(dist.sex_probs, [s.value for s in Sex], f"{name}.sex_probs")
            _check_probs(dist.location_probs, [l.value for l in Location], f"{name}.location_probs")
            _check_probs(dist.slide_probs, _SLIDE_OPTIONS, f"{name}.slide_probs")
            if not AGE_MIN <= dist.age_min < dist.age_median < dist.age_max <= AGE_MAX:
                raise ConfigError(f"{name} age range invalid", f"{name}.age_median")

    @classmethod
    def from_dict(cls, d: Mapping) -> CohortSpec:
        """Build from a JSON document. ``n_cases`` and ``aberration_probs`` are required."""
        for key in ("n_cases", "aberration_probs"):
            if key not in d:
                raise ConfigError(f"missing required field {key!r}", key)
        known = {
            "n_cases", "aberration_probs", "lineage_ratio", "category_probs_by_aberration",
            "spitz_clinical", "melanoma_clinical", "lesions_per_patient", "seed",
        }
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown cohort fields {sorted(extra)}", sorted(extra)[0])
        kwargs = dict(d)
        for name in ("spitz_clinical", "melanoma_clinical"):
            if name in kwargs:
                try:
                    kwargs[name] = ClinicalDistribution(**kwargs[name])
                except TypeError as e:
                    raise ConfigError(f"bad {name}: {e}", name) from None
        spec = cls(**kwargs)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def sample_cohort(spec: CohortSpec) -> list[LesionCase]:
    """Draw ``spec.n_cases`` lesions; deterministic for a given seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_cases
    ab_p = _check_probs(spec.aberration_probs, [a.value for a in ABERRATIONS], "aberration_probs")

    is_spitz = rng.random(n) < spec.lineage_ratio
    ab_idx = rng.choice(len(ABERRATIONS), size=n, p=ab_p)
    cat_u = rng.random(n)
    sex_u = rng.random(n)
    loc_u = rng.random(n)
    age_u = rng.random(n)
    slide_u = rng.random(n)

    def pick(u: float, probs: Mapping[str, float], keys) -> str:
        cdf = np.cumsum([probs[k] for k in keys])
        return keys[min(int(np.searchsorted(cdf, u, side="right")), len(keys) - 1)]

    cases = []
    for i in range(n):
        case_id = f"C{i:06d}"
        patient_id = f"P{i // spec.lesions_per_patient:06d}"
        if is_spitz[i]:
            lineage = Lineage.SPITZ
            aberration = ABERRATIONS[ab_idx[i]]
            row = spec.category_probs_by_aberration[aberration.value]
            category = DiagnosticCategory(pick(cat_u[i], row, [c.value for c in CATEGORIES]))
            dist = spec.spitz_clinical
        else:
            lineage = Lineage.CONVENTIONAL_MELANOMA
            aberration = None
            category = DiagnosticCategory.MALIGNANT
            dist = spec.melanoma_clinical
        # inverse-CDF draw keeps one uniform per case per field
        age = _triangular_ppf(age_u[i], dist.age_min, dist.age_mode, dist.age_max)
        age = int(min(max(math.floor(age + 0.5), dist.age_min), dist.age_max))
        clinical = ClinicalFeatures(
            age=age,
            sex=Sex(pick(sex_u[i], dist.sex_probs, [s.value for s in Sex])),
            location=Location(pick(loc_u[i], dist.location_probs, [l.value for l in Location])),
        )
        slides = pick(slide_u[i], dist.slide_probs, list(_SLIDE_OPTIONS))
        refs = {}
        if slides in ("BOTH", "INTERNAL"):
            refs[SlideKind.INTERNAL] = f"{case_id}-INT"
        if slides in ("BOTH", "CONSULTATION"):
            refs[SlideKind.CONSULTATION] = f"{case_id}-CON"
        cases.append(
            LesionCase(case_id, patient_id, lineage, aberration, category, clinical, refs)
        )
    return cases


def _triangular_ppf(u: float, lo: float, mode: float, hi: float) -> float:
    split = (mode - lo) / (hi - lo)
    if u < split:
        return lo + math.sqrt(u * (hi - lo) * (mode - lo))
    return hi - math.sqrt((1 - u) * (hi - lo) * (hi - mode))


# --------------------------------------------------------------------------
# Splitting


def subtype_key(case: LesionCase) -> str:
    """Default stratification key: lineage plus aberration group."""
    if case.lineage is Lineage.SPITZ:
        return f"SPITZ-{case.aberration.value}"
    return case.lineage.value


@dataclass(frozen=True)
class Split:
    folds: list[list[str]]
    test: list[str]

    def dev_ids(self) -> list[str]:
        return sorted(i for f in self.folds for i in f)

    def train_ids(self, fold_index: int) -> list[str]:
        return sorted(i for k, f in enumerate(self.folds) if k != fold_index for i in f)

    def to_dict(self) -> dict:
        return {"folds": self.folds, "test": self.test}

    @classmethod
    def from_dict(cls, d: Mapping) -> Split:
        try:
            return cls(folds=[sorted(f) for f in d["folds"]], test=sorted(d["test"]))
        except KeyError as e:
            raise ConfigError(f"split missing field {e.args[0]!r}", e.args[0]) from None


def split_dataset(
    cases: list[LesionCase],
    dev_fraction: float = 0.75,
    n_folds: int = 5,
    seed: int = 0,
    key: Callable[[LesionCase], str] = subtype_key,
) -> Split:
    """Patient-level stratified split into a test set and ``n_folds`` dev folds.

    Patients are stratified by the key of their first case. Within each
    stratum a rounded ``1 - dev_fraction`` share of patients goes to test;
    the rest are dealt round-robin over folds, with the deal position carried
    across strata so fold sizes stay balanced.
    """
    if not 0.0 < dev_fraction < 1.0:
        raise ConfigError("dev_fraction must lie in (0, 1)", "dev_fraction")
    if n_folds < 2:
        raise ConfigError("n_folds must be >= 2", "n_folds")

    by_patient: dict[str, list[LesionCase]] = defaultdict(list)
    for c in cases:
        by_patient[c.patient_id].append(c)
    if len(by_patient) < n_folds + 1:
        raise ConfigError(
            f"{len(by_patient)} distinct patients cannot fill {n_folds} folds plus a test set",
            "n_folds",
        )

    strata: dict[str, list[str]] = defaultdict(list)
    for pid in sorted(by_patient):
        first = min(by_patient[pid], key=lambda c: c.case_id)
        strata[key(first)].append(pid)

    rng = np.random.default_rng(seed)
    test_patients: list[str] = []
    dev_by_stratum: list[list[str]] = []
    for name in sorted(strata):
        pids = list(strata[name])
        rng.shuffle(pids)
        n_test = math.floor((1.0 - dev_fraction) * len(pids) + 0.5)
        test_patients.extend(pids[:n_test])
        dev_by_stratum.append(pids[n_test:])

    n_dev = sum(len(s) for s in dev_by_stratum)
    if not test_patients or n_dev < n_folds:
        raise ConfigError("too few patients per stratum to form the split", "n_folds")

    fold_patients: list[list[str]] = [[] for _ in range(n_folds)]
    slot = int(rng.integers(n_folds))
    for pids in dev_by_stratum:
        for pid in pids:
            fold_patients[slot].append(pid)
            slot = (slot + 1) % n_folds

    def ids(pids: Iterable[str]) -> list[str]:
        return sorted(c.case_id for p in pids for c in by_patient[p])

    return Split(folds=[ids(f) for f in fold_patients], test=ids(test_patients))
