"""Evaluation statistics: accuracy, AUROC, stratified bootstrap, exact tests."""

from __future__ import annotations

import bisect
import csv
import functools
import io
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ConfigError


class UndefinedMetricError(ValueError):
    """Metric is undefined on this sample (e.g. AUROC with one class)."""


@dataclass(frozen=True)
class EvalSet:
    case_ids: Sequence[str]
    labels: np.ndarray
    probs: np.ndarray
    predicted: np.ndarray

    @classmethod
    def from_probs(cls, case_ids, labels, probs, threshold: float | None = None) -> EvalSet:
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if probs.ndim != 2 or len(probs) != len(labels) or len(case_ids) != len(labels):
            raise ConfigError("case_ids, labels and probs must have equal lengths")
        if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6) or np.any(probs < 0):
            raise ConfigError("probability rows must be simplex vectors")
        if threshold is not None:
            if probs.shape[1] != 2:
                raise ConfigError("threshold applies to binary tasks only", "threshold")
            predicted = (probs[:, 1] >= threshold).astype(np.int64)
        else:
            predicted = predict_labels(probs)
        return cls(list(case_ids), labels, probs, predicted)


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def accuracy(true, predicted) -> float:
    true = np.asarray(true)
    predicted = np.asarray(predicted)
    if true.shape != predicted.shape:
        raise ConfigError(f"length mismatch: {true.shape} vs {predicted.shape}")
    if true.size == 0:
        raise ConfigError("accuracy of an empty set")
    return float(np.mean(true == predicted))


def _auroc_counts(scores: np.ndarray, positive: np.ndarray) -> tuple[int, int, int]:
    """Return (2U, n_pos, n_neg) with U the Mann-Whitney count, ties counted half."""
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    p = positive[order].astype(np.int64)
    # group equal scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos_g = np.add.reduceat(p, starts)
    tot_g = np.diff(np.r_[starts, len(s)])
    neg_g = tot_g - pos_g
    neg_below = np.cumsum(neg_g) - neg_g
    twice_u = int(np.sum(2 * pos_g * neg_below + pos_g * neg_g))
    return twice_u, int(p.sum()), int(len(p) - p.sum())


def auroc_binary(scores, labels) -> float:
    """Exact AUROC: P(score+ > score-) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels).astype(bool)
    if scores.shape != positive.shape:
        raise ConfigError("scores and labels differ in length")
    twice_u, n_pos, n_neg = _auroc_counts(scores, positive)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative cases")
    return twice_u / (2 * n_pos * n_neg)


def auroc_ovr(probs, labels, k: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    return auroc_binary(probs[:, k], np.asarray(labels) == k)


@dataclass(frozen=True)
class CiResult:
    point: float
    lower: float
    upper: float
    R: int
    alpha: float = 0.05
    n_redrawn: int = 0


class _Strata:
    """Maps uniforms to within-stratum resample indices.

    Each resample consumes one uniform per case, so a block of resamples
    drawn at once equals the same resamples drawn one by one.
    """

    def __init__(self, strata: np.ndarray):
        order = np.argsort(strata, kind="stable")
        _, first, counts = np.unique(strata[order], return_index=True, return_counts=True)
        self.members = order
        pos = np.empty(len(strata), dtype=np.int64)
        pos[order] = np.arange(len(strata))
        group = np.searchsorted(first, pos, side="right") - 1
        self.start = first[group]
        self.size = counts[group]

    def draw(self, rng: np.random.Generator, n_resamples: int | None = None) -> np.ndarray:
        shape = (len(self.start),) if n_resamples is None else (n_resamples, len(self.start))
        u = rng.random(shape)
        return self.members[self.start + (u * self.size).astype(np.int64)]


def bootstrap_ci(
    metric: Callable[[EvalSet], float],
    data: EvalSet,
    R: int = 10_000,
    seed: int = 0,
    alpha: float = 0.05,
    strata: np.ndarray | None = None,
    max_redraws: int | None = None,
) -> CiResult:
    """Stratified percentile bootstrap.

    Resamples with replacement within each stratum (true label by default),
    keeping stratum sizes. Resamples on which ``metric`` raises
    :class:`UndefinedMetricError` are redrawn and counted.
    """
    strata = np.asarray(data.labels if strata is None else strata)
    if len(strata) == 0:
        raise ConfigError("bootstrap of an empty evaluation set")
    point = float(metric(data))
    sampler = _Strata(strata)
    rng = np.random.default_rng(seed)
    limit = max_redraws if max_redraws is not None else 10 * R
    values = np.empty(R)
    redrawn = 0
    i = 0
    while i < R:
        idx = sampler.draw(rng)
        sample = EvalSet(
            [data.case_ids[j] for j in idx],
            data.labels[idx], data.probs[idx], data.predicted[idx],
        )
        try:
            values[i] = metric(sample)
        except UndefinedMetricError:
            redrawn += 1
            if redrawn > limit:
                raise
            continue
        i += 1
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return CiResult(point, float(lo), float(hi), R, alpha, redrawn)


def bootstrap_accuracy_ci(
    data: EvalSet, R: int = 10_000, seed: int = 0, alpha: float = 0.05
) -> CiResult:
    """Vectorized :func:`bootstrap_ci` for accuracy; identical draws and result."""
    strata = np.asarray(data.labels)
    correct = (data.labels == data.predicted).astype(np.float64)
    sampler = _Strata(strata)
    rng = np.random.default_rng(seed)
    values = np.empty(R)
    block = max(1, 2_000_000 // max(1, len(strata)))
    for start in range(0, R, block):
        stop = min(R, start + block)
        values[start:stop] = correct[sampler.draw(rng, stop - start)].mean(axis=1)
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return CiResult(float(correct.mean()), float(lo), float(hi), R, alpha, 0)


def eval_accuracy(data: EvalSet) -> float:
    return accuracy(data.labels, data.predicted)


def eval_auroc(k: int) -> Callable[[EvalSet], float]:
    def metric(data: EvalSet) -> float:
        return auroc_ovr(data.probs, data.labels, k)

    metric.__name__ = f"auroc_class{k}"
    return metric


# --------------------------------------------------------------------------
# Exact tests


@functools.lru_cache(maxsize=64)
def _binom_table(n: int, p: Fraction) -> tuple[list[Fraction], list[Fraction], list[Fraction]]:
    """Exact pmf, the pmf sorted ascending, and prefix sums of the sorted pmf."""
    q = 1 - p
    pmf = [math.comb(n, i) * p**i * q ** (n - i) for i in range(n + 1)]
    ordered = sorted(pmf)
    return pmf, ordered, list(itertools.accumulate(ordered))


def binomial_test(k: int, n: int, p0: float) -> float:
    """Exact two-sided binomial test (minimum-likelihood method).

    p = sum of P(X = i) over all i with P(X = i) <= P(X = k).
    """
    if not 0 <= k <= n:
        raise ConfigError(f"need 0 <= k <= n, got k={k}, n={n}")
    if not 0.0 < p0 < 1.0:
        raise ConfigError("p0 must lie in (0, 1)", "p0")
    if n <= 2000:
        pmf, ordered, prefix = _binom_table(n, Fraction(p0))
        total = prefix[bisect.bisect_right(ordered, pmf[k]) - 1]
        return min(1.0, float(total))
    # large n: log-space with a relative tolerance for ties
    i = np.arange(n + 1)
    logpmf = (
        np.array([math.lgamma(n + 1) - math.lgamma(j + 1) - math.lgamma(n - j + 1) for j in i])
        + i * math.log(p0) + (n - i) * math.log1p(-p0)
    )
    keep = logpmf <= logpmf[k] + 1e-7
    return min(1.0, float(np.exp(logpmf[keep]).sum()))


def mcnemar_exact(b: int, c: int) -> float:
    """Exact McNemar test on discordant counts ``b`` and ``c``."""
    if b < 0 or c < 0:
        raise ConfigError("discordant counts must be >= 0")
    n = b + c
    if n == 0:
        return 1.0
    tail = Fraction(sum(math.comb(n, i) for i in range(min(b, c) + 1)), 2**n)
    return float(min(Fraction(1), 2 * tail))


def bonferroni(p: float, m: int = 4) -> float:
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    if m < 1:
        raise ConfigError("m must be >= 1")
    return min(1.0, m * p)


# --------------------------------------------------------------------------
# Report


REPORT_COLUMNS = ("task", "model", "slide_kind", "metric", "class", "point", "lo", "hi")


@dataclass(frozen=True)
class ReportRow:
    task: str
    model: str
    slide_kind: str
    metric: str
    cls: str
    ci: CiResult

    def as_list(self) -> list[str]:
        return [
            self.task, self.model, self.slide_kind, self.metric, self.cls,
            f"{self.ci.point:.6f}", f"{self.ci.lower:.6f}", f"{self.ci.upper:.6f}",
        ]


def evaluate_rows(
    task: str,
    model: str,
    slide_kind: str,
    data: EvalSet,
    class_names: Sequence[str],
    R: int = 10_000,
    seed: int = 0,
) -> list[ReportRow]:
    """Accuracy plus per-class AUROC (one-vs-rest; positive class only when binary)."""
    rows = [ReportRow(task, model, slide_kind, "accuracy", "all", bootstrap_accuracy_ci(data, R, seed))]
    ks = [1] if len(class_names) == 2 else range(len(class_names))
    for k in ks:
        try:
            ci = bootstrap_ci(eval_auroc(k), data, R, seed)
        except UndefinedMetricError:
            continue
        rows.append(ReportRow(task, model, slide_kind, "auroc", class_names[k], ci))
    return rows


def write_report(rows: Iterable[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()
