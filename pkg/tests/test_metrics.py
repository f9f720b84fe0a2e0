from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from spitzkit import ConfigError
from spitzkit.metrics import (
    REPORT_COLUMNS,
    EvalSet,
    UndefinedMetricError,
    accuracy,
    auroc_binary,
    auroc_ovr,
    binomial_test,
    bonferroni,
    bootstrap_accuracy_ci,
    bootstrap_ci,
    eval_accuracy,
    eval_auroc,
    evaluate_rows,
    mcnemar_exact,
    predict_labels,
    write_report,
)


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def _evalset(labels, probs, **kw):
    return EvalSet.from_probs([f"c{i}" for i in range(len(labels))], labels, probs, **kw)


# --- accuracy ---------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy(list("aabb"), list("abbb")) == 0.75
    with pytest.raises(ConfigError):
        accuracy([0, 1], [0])


def test_accuracy_random_k_class():
    rng = np.random.default_rng(0)
    for k in (2, 3, 4):
        y = rng.integers(0, k, 100_000)
        p = rng.integers(0, k, 100_000)
        assert abs(accuracy(y, p) - 1 / k) <= 0.01


def test_argmax_ties_lowest_index():
    assert predict_labels(np.array([[0.4, 0.4, 0.2], [0.25, 0.25, 0.5]])).tolist() == [0, 2]


# --- AUROC ------------------------------------------------------------------


def test_auroc_examples():
    assert auroc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc_binary([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    scores = [0.1, 0.4, 0.35, 0.8]
    # both positives outrank both negatives under these labels
    assert auroc_binary(scores, [0, 1, 0, 1]) == float(brute_auroc(scores, [0, 1, 0, 1])) == 1.0
    assert auroc_binary(scores, [0, 0, 1, 1]) == float(brute_auroc(scores, [0, 0, 1, 1])) == 0.75
    with pytest.raises(UndefinedMetricError):
        auroc_binary([0.1, 0.2], [1, 1])


def test_auroc_matches_brute_force_1000_instances():
    rng = np.random.default_rng(42)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse grid forces ties
        scores = rng.integers(0, int(rng.integers(2, 12)), n) / 10
        assert auroc_binary(scores, labels) == float(brute_auroc(scores, labels))


def test_auroc_matches_scipy_mann_whitney():
    rng = np.random.default_rng(1)
    s = rng.integers(0, 5, 300).astype(float)
    y = rng.integers(0, 2, 300)
    u = stats.mannwhitneyu(s[y == 1], s[y == 0]).statistic
    assert auroc_binary(s, y) == pytest.approx(u / ((y == 1).sum() * (y == 0).sum()), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30, unique=True), st.randoms())
def test_auroc_complement_tie_free(scores, r):
    labels = [r.randint(0, 1) for _ in scores]
    labels[0], labels[1] = 0, 1
    s = np.array(scores)
    assert auroc_binary(s, labels) + auroc_binary(-s, labels) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=2, max_size=30), st.randoms())
def test_auroc_monotone_invariance(scores, r):
    labels = [r.randint(0, 1) for _ in scores]
    labels[0], labels[1] = 0, 1
    s = np.array(scores, dtype=float)
    base = auroc_binary(s, labels)
    assert auroc_binary(np.exp(s / 5), labels) == base
    assert auroc_binary(s**3 + 7, labels) == base


def test_auroc_ovr():
    rng = np.random.default_rng(3)
    p1 = rng.random(50)
    probs = np.c_[1 - p1, p1]
    y = rng.integers(0, 2, 50)
    assert auroc_ovr(probs, y, 1) == auroc_binary(p1, y)
    y4 = np.arange(40) % 4
    assert all(auroc_ovr(np.eye(4)[y4], y4, k) == 1.0 for k in range(4))
    assert all(auroc_ovr(np.full((40, 4), 0.25), y4, k) == 0.5 for k in range(4))


# --- bootstrap --------------------------------------------------------------


def test_bootstrap_constant_metric():
    y = np.array([0, 1, 2, 0, 1, 2])
    es = _evalset(y, np.eye(3)[y])
    ci = bootstrap_ci(eval_accuracy, es, R=500, seed=0)
    assert (ci.point, ci.lower, ci.upper) == (1.0, 1.0, 1.0)


def test_bootstrap_deterministic_and_point():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 80)
    probs = rng.dirichlet(np.ones(3), 80)
    es = _evalset(y, probs)
    a = bootstrap_ci(eval_auroc(1), es, R=300, seed=5)
    b = bootstrap_ci(eval_auroc(1), es, R=300, seed=5)
    assert a == b
    assert a.point == auroc_ovr(probs, y, 1)
    assert a.lower <= a.point <= a.upper


def test_bootstrap_fast_accuracy_path_identical():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 120)
    probs = rng.dirichlet(np.ones(2), 120)
    es = _evalset(y, probs)
    slow = bootstrap_ci(eval_accuracy, es, R=400, seed=9)
    fast = bootstrap_accuracy_ci(es, R=400, seed=9)
    assert (slow.point, slow.lower, slow.upper) == (fast.point, fast.lower, fast.upper)


def test_bootstrap_strata_sizes_preserved():
    y = np.array([0] * 5 + [1] * 20)
    seen = []

    def metric(d):
        seen.append(np.bincount(d.labels, minlength=2).tolist())
        return 0.0

    bootstrap_ci(metric, _evalset(y, np.eye(2)[y]), R=50, seed=0)
    assert all(s == [5, 20] for s in seen)


def test_bootstrap_redraw_counter():
    # stratify on something other than the label so a class can vanish
    y = np.array([0, 1, 0, 0, 0, 0])
    es = _evalset(y, np.eye(2)[y])
    ci = bootstrap_ci(eval_auroc(1), es, R=200, seed=0, strata=np.zeros(6))
    assert ci.n_redrawn > 0
    assert ci.R == 200


def test_bootstrap_width_matches_normal_approximation():
    rng = np.random.default_rng(11)
    n = 193
    y = rng.integers(0, 2, n)
    correct = rng.random(n) < 0.86
    pred = np.where(correct, y, 1 - y)
    es = EvalSet([str(i) for i in range(n)], y, np.eye(2)[pred], pred)
    ci = bootstrap_accuracy_ci(es, R=10_000, seed=0)
    acc = correct.mean()
    expected = 2 * 1.96 * np.sqrt(acc * (1 - acc) / n)
    assert abs((ci.upper - ci.lower) - expected) < 0.015
    assert abs(expected - 0.098) < 0.01 or abs(acc - 0.86) > 0.02


@pytest.mark.slow
def test_bootstrap_coverage_500_worlds():
    covered = 0
    for w in range(500):
        rng = np.random.default_rng([2024, w])
        n = 200
        y = rng.integers(0, 2, n)
        pred = np.where(rng.random(n) < 0.7, y, 1 - y)
        es = EvalSet([str(i) for i in range(n)], y, np.eye(2)[pred], pred)
        ci = bootstrap_accuracy_ci(es, R=2000, seed=w)
        covered += ci.lower <= 0.7 <= ci.upper
    assert 0.93 <= covered / 500 <= 0.97


# --- exact tests ------------------------------------------------------------


def _binom_oracle(k, n, p0):
    p0 = Fraction(p0).limit_denominator(10**6)
    pmf = [comb(n, i) * p0**i * (1 - p0) ** (n - i) for i in range(n + 1)]
    return float(sum(q for q in pmf if q <= pmf[k]))


def test_binomial_examples():
    assert binomial_test(55, 100, 0.25) < 1e-9
    assert binomial_test(25, 100, 0.25) == 1.0
    assert binomial_test(8, 10, 0.5) == 0.109375
    assert 0.109375 == 2 * (1 + 10 + 45) / 1024


@pytest.mark.parametrize("k,n,p0", [(3, 20, 0.3), (0, 15, 0.1), (15, 15, 0.1), (40, 90, 0.5), (7, 30, 1 / 3)])
def test_binomial_matches_oracle(k, n, p0):
    assert binomial_test(k, n, p0) == pytest.approx(_binom_oracle(k, n, p0), rel=1e-9)


def test_binomial_matches_scipy():
    for k, n, p0 in [(12, 50, 0.2), (55, 100, 0.25), (300, 1000, 0.33), (2600, 5000, 0.5)]:
        assert binomial_test(k, n, p0) == pytest.approx(stats.binomtest(k, n, p0).pvalue, rel=1e-6, abs=1e-300)


def test_binomial_super_uniform_under_null():
    rng = np.random.default_rng(0)
    n, p0 = 60, 0.3
    ks = rng.binomial(n, p0, 2000)
    pv = np.array([binomial_test(int(k), n, p0) for k in ks])
    assert np.mean(pv <= 0.05) <= 0.07


def test_mcnemar_examples():
    assert mcnemar_exact(5, 5) == 1.0
    assert mcnemar_exact(2, 8) == 0.109375
    assert mcnemar_exact(0, 0) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 60), st.integers(0, 60))
def test_mcnemar_symmetric_and_exact(b, c):
    p = mcnemar_exact(b, c)
    assert p == mcnemar_exact(c, b)
    if b + c:
        exact = min(Fraction(1), 2 * Fraction(sum(comb(b + c, i) for i in range(min(b, c) + 1)), 2 ** (b + c)))
        assert p == pytest.approx(float(exact), rel=1e-12)


def test_bonferroni():
    assert bonferroni(0.012, 4) == pytest.approx(0.048)
    assert bonferroni(0.5, 4) == 1.0
    assert bonferroni(0.0005) == pytest.approx(0.002)


# --- report -----------------------------------------------------------------


def test_report_layout_and_one_hot():
    y = np.arange(30) % 3
    es = _evalset(y, np.eye(3)[y])
    rows = evaluate_rows("aberration", "mil", "INTERNAL", es, ["A", "B", "C"], R=100, seed=0)
    text = write_report(rows)
    lines = text.splitlines()
    assert tuple(lines[0].split(",")) == REPORT_COLUMNS
    assert len(lines) == 1 + 1 + 3
    for line in lines[1:]:
        point, lo, hi = map(float, line.split(",")[-3:])
        assert point == lo == hi == 1.0


def test_report_binary_has_single_auroc_row():
    y = np.arange(20) % 2
    es = _evalset(y, np.eye(2)[y])
    rows = evaluate_rows("lineage", "mil", "INTERNAL", es, ["CM", "SPITZ"], R=50)
    assert [r.metric for r in rows] == ["accuracy", "auroc"]
