import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from spitzkit import ConfigError
from conftest import SPITZ_LABEL_ROWS, check_partition as _check_partition
from spitzkit.cohort import (
    ABERRATIONS,
    AberrationClass,
    ClinicalFeatures,
    CohortSpec,
    DiagnosticCategory,
    LesionCase,
    Lineage,
    SlideKind,
    REFERENCE_ABERRATION_PROBS,
    dumps_cohort,
    group_aberration,
    group_category,
    loads_cohort,
    sample_cohort,
    split_dataset,
    subtype_key,
    triangular_mode_for_median,
)

def _case(i, pid, key, n_per=1):
    lineage = Lineage.SPITZ if key != "CM" else Lineage.CONVENTIONAL_MELANOMA
    ab = None if key == "CM" else AberrationClass(key)
    return LesionCase(
        f"C{i:04d}", pid, lineage, ab, DiagnosticCategory.MALIGNANT,
        ClinicalFeatures(40, "FEMALE", "TRUNK"), {SlideKind.INTERNAL: f"C{i:04d}-INT"},
    )


# --- grouping ---------------------------------------------------------------


@pytest.mark.parametrize("label", sorted(SPITZ_LABEL_ROWS))
def test_group_aberration_table_inventory(label):
    assert group_aberration(label) is SPITZ_LABEL_ROWS[label][1]


def test_group_aberration_examples():
    assert group_aberration("HRAS mutation") is AberrationClass.OTHER
    assert group_aberration("ALK fusion") is AberrationClass.ALK
    assert group_aberration("NTRK3 fusion") is AberrationClass.NTRK
    assert group_aberration("  alk   FUSION ") is AberrationClass.ALK


def test_grouped_counts_match_table():
    counts = Counter()
    for n, cls in SPITZ_LABEL_ROWS.values():
        counts[cls] += n
    assert sum(counts.values()) == 393
    assert counts[AberrationClass.ALK] == 59
    assert counts[AberrationClass.NTRK] == 111
    # grouped fractions agree with the default vector to rounding
    for cls, n in counts.items():
        assert abs(n / 393 - REFERENCE_ABERRATION_PROBS[cls.value]) < 0.004


@pytest.mark.parametrize("label", ["BRAF mutation", "NRAS mutation", "BRAF & NRAS mutation"])
def test_melanoma_labels_rejected(label):
    with pytest.raises(ConfigError, match="melanoma"):
        group_aberration(label)


def test_unknown_label_lists_accepted():
    with pytest.raises(ConfigError, match="accepted: .*alk fusion"):
        group_aberration("KIT mutation")


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("Benign", DiagnosticCategory.BENIGN),
        ("Benign / intermediate", DiagnosticCategory.INTERMEDIATE),
        ("Benign/Intermediate", DiagnosticCategory.INTERMEDIATE),
        ("Intermediate", DiagnosticCategory.INTERMEDIATE),
        ("Intermediate / malignant", DiagnosticCategory.MALIGNANT),
        ("Malignant", DiagnosticCategory.MALIGNANT),
    ],
)
def test_group_category(raw, expected):
    assert group_category(raw) is expected


def test_group_category_unknown():
    with pytest.raises(ConfigError):
        group_category("Borderline")


# --- data model -------------------------------------------------------------


def test_case_invariants():
    clin = ClinicalFeatures(30, "MALE", "TRUNK")
    with pytest.raises(ConfigError):
        LesionCase("a", "p", "SPITZ", None, "BENIGN", clin, {"INTERNAL": "x"})
    with pytest.raises(ConfigError):
        LesionCase("a", "p", "CONVENTIONALMELANOMA", "ALK", "MALIGNANT", clin, {"INTERNAL": "x"})
    with pytest.raises(ConfigError):
        LesionCase("a", "p", "CONVENTIONALMELANOMA", None, "BENIGN", clin, {"INTERNAL": "x"})
    with pytest.raises(ConfigError):
        LesionCase("a", "p", "SPITZ", "ALK", "BENIGN", clin, {})
    with pytest.raises(ConfigError):
        ClinicalFeatures(0, "MALE", "TRUNK")
    with pytest.raises(ValueError):
        ClinicalFeatures(30, "MALE", "SCALP")


def test_cohort_jsonl_round_trip():
    cases = sample_cohort(CohortSpec(n_cases=50, seed=4))
    text = dumps_cohort(cases)
    assert len(text.splitlines()) == 50
    assert dumps_cohort(loads_cohort(text)) == text
    rec = json.loads(text.splitlines()[0])
    assert rec["lineage"] in ("SPITZ", "CONVENTIONALMELANOMA")


# --- sampling ---------------------------------------------------------------


def test_sample_cohort_deterministic():
    spec = CohortSpec(n_cases=300, seed=11)
    assert dumps_cohort(sample_cohort(spec)) == dumps_cohort(sample_cohort(spec))
    other = CohortSpec(n_cases=300, seed=12)
    assert dumps_cohort(sample_cohort(spec)) != dumps_cohort(sample_cohort(other))


def test_sample_cohort_one_hot_degenerate():
    spec = CohortSpec(
        n_cases=1, lineage_ratio=1.0,
        aberration_probs={"ALK": 1.0, "ROS1": 0.0, "NTRK": 0.0, "OTHER": 0.0},
    )
    (case,) = sample_cohort(spec)
    assert case.lineage is Lineage.SPITZ
    assert case.aberration is AberrationClass.ALK


def test_sample_cohort_bad_probs_names_field():
    spec = CohortSpec(n_cases=5, aberration_probs={"ALK": 0.5, "ROS1": 0.2, "NTRK": 0.2, "OTHER": 0.2})
    with pytest.raises(ConfigError) as err:
        sample_cohort(spec)
    assert err.value.field == "aberration_probs"
    with pytest.raises(ConfigError) as err:
        CohortSpec.from_dict({"n_cases": 5})
    assert err.value.field == "aberration_probs"


@pytest.fixture(scope="module")
def big_spitz_cohort():
    spec = CohortSpec(n_cases=100_000, lineage_ratio=1.0, seed=2024)
    return sample_cohort(spec)


def test_marginals_within_half_point(big_spitz_cohort):
    counts = Counter(c.aberration.value for c in big_spitz_cohort)
    for k, p in REFERENCE_ABERRATION_PROBS.items():
        assert abs(counts[k] / 100_000 - p) <= 0.005


def test_marginals_chi_square(big_spitz_cohort):
    counts = Counter(c.aberration.value for c in big_spitz_cohort)
    obs = [counts[a.value] for a in ABERRATIONS]
    exp = [REFERENCE_ABERRATION_PROBS[a.value] * 100_000 for a in ABERRATIONS]
    assert stats.chisquare(obs, exp).pvalue > 0.01


def test_triangular_mode_matches_median():
    for lo, hi, med in [(1, 73, 27), (3, 85, 48), (0, 10, 5), (0, 10, 7), (0, 10, 3.5)]:
        mode = triangular_mode_for_median(lo, hi, med)
        assert stats.triang.median((mode - lo) / (hi - lo), loc=lo, scale=hi - lo) == pytest.approx(med)
    # medians beyond what a triangle can reach clamp the mode to the edge
    assert triangular_mode_for_median(0, 10, 8) == 10


def test_age_median_close_to_target(big_spitz_cohort):
    ages = np.array([c.clinical.age for c in big_spitz_cohort])
    assert abs(np.median(ages) - 27) <= 1
    assert ages.min() >= 1 and ages.max() <= 73


# --- splitting --------------------------------------------------------------


def test_split_partition_100_seeds():
    cases = sample_cohort(CohortSpec(n_cases=400, lesions_per_patient=3, seed=5))
    for seed in range(100):
        _check_partition(cases, split_dataset(cases, seed=seed))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(12, 150),
    per=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
    n_folds=st.integers(2, 5),
)
def test_split_partition_property(n, per, seed, n_folds):
    cases = sample_cohort(CohortSpec(n_cases=n, lesions_per_patient=per, seed=seed % 1000))
    try:
        split = split_dataset(cases, n_folds=n_folds, seed=seed)
    except ConfigError:
        return
    _check_partition(cases, split)


def test_split_paper_scale():
    cases = sample_cohort(CohortSpec(n_cases=772, seed=0))
    split = split_dataset(cases, 0.75, 5, seed=0)
    _check_partition(cases, split)
    assert abs(len(split.test) - 193) <= 3
    sizes = [len(f) for f in split.folds]
    assert max(sizes) - min(sizes) <= 1


def test_split_stratification_within_five_points():
    cases = sample_cohort(CohortSpec(n_cases=772, seed=3))
    key = {c.case_id: subtype_key(c) for c in cases}
    glob = Counter(key.values())
    split = split_dataset(cases, seed=9)
    for part in split.folds + [split.test]:
        local = Counter(key[i] for i in part)
        for k, n in glob.items():
            assert abs(local[k] / len(part) - n / len(cases)) <= 0.05


def test_split_single_patient_errors():
    cases = [_case(i, "P0", "ALK") for i in range(20)]
    with pytest.raises(ConfigError):
        split_dataset(cases)


def test_split_balanced_classes_reach_every_fold():
    keys = ["ALK", "ROS1", "NTRK", "OTHER"]
    cases = [_case(i, f"P{i}", keys[i % 4]) for i in range(40)]
    for seed in range(20):
        split = split_dataset(cases, seed=seed)
        by_id = {c.case_id: c.aberration for c in cases}
        for fold in split.folds:
            assert {by_id[i] for i in fold} == set(AberrationClass)
