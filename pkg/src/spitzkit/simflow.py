"""Monte Carlo simulation of ancillary-test ordering for Spitz tumors.

Each simulated case starts with an H&E examination. The ALK, ROS1 and NTRK
IHC stains run either together or one after another; the first positive
stain ends the work-up, otherwise molecular diagnostics follows. An AI
recommender can skip IHC altogether (predicted probability of the ``OTHER``
class above a threshold) and can reorder sequential stains.

All strategies in a run see the same sampled cases and the same stain
outcome draws, so differences between strategies are paired.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ConfigError
from .cohort import ABERRATIONS, AberrationClass, LesionCase, Lineage

STAINS = (AberrationClass.ALK, AberrationClass.ROS1, AberrationClass.NTRK)
OTHER = ABERRATIONS.index(AberrationClass.OTHER)
METRICS = ("cost", "tat", "examinations")


class IhcMode(str, Enum):
    PARALLEL = "PARALLEL"
    SEQUENTIAL = "SEQUENTIAL"


class Ordering(str, Enum):
    PREVALENCE = "PREVALENCE"
    PREDICTED_PROB = "PREDICTEDPROB"


class RecommenderRole(str, Enum):
    NONE = "NONE"
    AI = "AI"
    PERFECT_AI = "PERFECTAI"


class StainResult(str, Enum):
    POSITIVE = "POSITIVE"
    NEGATIVE_OR_AMBIGUOUS = "NEGATIVEORAMBIGUOUS"


@dataclass(frozen=True)
class Strategy:
    ihc_mode: IhcMode
    ordering: Ordering = Ordering.PREVALENCE
    recommender: RecommenderRole = RecommenderRole.NONE

    def __post_init__(self):
        object.__setattr__(self, "ihc_mode", IhcMode(self.ihc_mode))
        object.__setattr__(self, "ordering", Ordering(self.ordering))
        object.__setattr__(self, "recommender", RecommenderRole(self.recommender))
        if self.ordering is Ordering.PREDICTED_PROB and self.recommender is RecommenderRole.NONE:
            raise ConfigError("PREDICTEDPROB ordering requires a recommender", "ordering")

    @property
    def name(self) -> str:
        if self.ihc_mode is IhcMode.PARALLEL:
            mode = "parallel"
        else:
            mode = "sequential-" + (
                "prevalence" if self.ordering is Ordering.PREVALENCE else "predprob"
            )
        return f"{mode}/{self.recommender.value.lower()}"

    @classmethod
    def from_dict(cls, d: Mapping) -> Strategy:
        try:
            return cls(
                IhcMode(d["ihc_mode"]),
                Ordering(d.get("ordering", "PREVALENCE")),
                RecommenderRole(d.get("recommender", "NONE")),
            )
        except KeyError as e:
            raise ConfigError(f"strategy missing field {e.args[0]!r}", e.args[0]) from None
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad strategy {dict(d)}: {e}", "strategies") from None

    def to_dict(self) -> dict:
        return {
            "ihc_mode": self.ihc_mode.value,
            "ordering": self.ordering.value,
            "recommender": self.recommender.value,
        }


P, S = IhcMode.PARALLEL, IhcMode.SEQUENTIAL
STANDARD_STRATEGIES = (
    Strategy(P, Ordering.PREVALENCE, RecommenderRole.NONE),
    Strategy(S, Ordering.PREVALENCE, RecommenderRole.NONE),
    Strategy(P, Ordering.PREVALENCE, RecommenderRole.AI),
    Strategy(S, Ordering.PREVALENCE, RecommenderRole.AI),
    Strategy(S, Ordering.PREDICTED_PROB, RecommenderRole.AI),
    Strategy(P, Ordering.PREVALENCE, RecommenderRole.PERFECT_AI),
    Strategy(S, Ordering.PREVALENCE, RecommenderRole.PERFECT_AI),
    Strategy(S, Ordering.PREDICTED_PROB, RecommenderRole.PERFECT_AI),
)
del P, S


@dataclass
class WorkflowConfig:
    stain_cost: float = 100.0
    molecular_cost: float = 1000.0
    stain_days: float = 1.0
    molecular_days: float = 10.0
    fn_prob: dict[str, float] = field(
        default_factory=lambda: {"ALK": 0.055, "ROS1": 0.448, "NTRK": 0.255}
    )
    threshold: float = 0.5
    cases_per_iteration: int = 100
    iterations: int = 10_000
    seed: int = 0
    # high to low grouped prevalence
    prevalence_order: tuple[str, ...] = ("NTRK", "ROS1", "ALK")

    def __post_init__(self):
        self.prevalence_order = tuple(self.prevalence_order)
        self.validate()

    def validate(self) -> None:
        for name in ("stain_cost", "molecular_cost", "stain_days", "molecular_days"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", name)
        if set(self.fn_prob) != {s.value for s in STAINS}:
            raise ConfigError("fn_prob needs exactly ALK, ROS1 and NTRK", "fn_prob")
        if any(not 0.0 <= v <= 1.0 for v in self.fn_prob.values()):
            raise ConfigError("fn_prob entries must lie in [0, 1]", "fn_prob")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)", "threshold")
        if self.cases_per_iteration < 1:
            raise ConfigError("cases_per_iteration must be >= 1", "cases_per_iteration")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1", "iterations")
        if sorted(self.prevalence_order) != sorted(s.value for s in STAINS):
            raise ConfigError("prevalence_order must be a permutation of the stains", "prevalence_order")

    @property
    def fn_vector(self) -> np.ndarray:
        return np.array([self.fn_prob[s.value] for s in STAINS])

    @property
    def prevalence_indices(self) -> np.ndarray:
        return np.array([ABERRATIONS.index(AberrationClass(s)) for s in self.prevalence_order])

    @classmethod
    def from_dict(cls, d: Mapping) -> WorkflowConfig:
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad workflow config: {e}", "workflow") from None

    def to_dict(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        d["prevalence_order"] = list(self.prevalence_order)
        return d


@dataclass(frozen=True)
class CaseOutcome:
    cost: float
    tat: float
    examinations: int


# --------------------------------------------------------------------------
# Recommenders


class RecommenderKind(str, Enum):
    PERFECT = "PERFECT"
    UNIFORM = "UNIFORM"
    CONFUSION_TABLE = "CONFUSIONTABLE"
    MODEL_BACKED = "MODELBACKED"


@dataclass
class Recommender:
    """Maps a case to a probability vector over (ALK, ROS1, NTRK, OTHER).

    ``CONFUSIONTABLE`` draws a predicted class from the true class's row and
    puts ``confidence`` on it, spreading the rest evenly. ``MODELBACKED``
    returns fixed per-case vectors for the cases of a test set.
    """

    kind: RecommenderKind
    confusion: np.ndarray | None = None
    confidence: float | None = None
    case_probs: np.ndarray | None = None
    case_classes: np.ndarray | None = None

    def outputs(self, true_idx: np.ndarray, case_idx: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Vectors for sampled cases; ``u`` is one uniform per case slot."""
        shape = np.shape(true_idx)
        if self.kind is RecommenderKind.PERFECT:
            return np.eye(4)[true_idx]
        if self.kind is RecommenderKind.UNIFORM:
            return np.full(shape + (4,), 0.25)
        if self.kind is RecommenderKind.CONFUSION_TABLE:
            cdf = np.cumsum(self.confusion, axis=1)[true_idx]
            pred = np.minimum((u[..., None] >= cdf).sum(axis=-1), 3)
            low = (1.0 - self.confidence) / 3.0
            out = np.full(shape + (4,), low)
            np.put_along_axis(out, pred[..., None], self.confidence, axis=-1)
            return out
        return self.case_probs[case_idx]

    def branches(self, true_class: int) -> list[tuple[float, np.ndarray]]:
        """Exact distribution of outputs for a case of ``true_class``."""
        if self.kind is RecommenderKind.PERFECT:
            return [(1.0, np.eye(4)[true_class])]
        if self.kind is RecommenderKind.UNIFORM:
            return [(1.0, np.full(4, 0.25))]
        if self.kind is RecommenderKind.CONFUSION_TABLE:
            low = (1.0 - self.confidence) / 3.0
            out = []
            for pred in range(4):
                w = float(self.confusion[true_class, pred])
                if w > 0:
                    vec = np.full(4, low)
                    vec[pred] = self.confidence
                    out.append((w, vec))
            return out
        rows = np.flatnonzero(self.case_classes == true_class)
        return [(1.0 / len(rows), self.case_probs[r]) for r in rows]


def make_recommender(kind: str | RecommenderKind, params: Mapping | None = None) -> Recommender:
    """Build a recommender.

    params by kind: ``CONFUSIONTABLE`` takes ``matrix`` (4x4 row-stochastic)
    and ``confidence`` in (0.25, 1]; ``MODELBACKED`` takes ``probs`` (one
    vector per test case, aligned with the test cases later passed to
    :func:`run_simulation`) and ``classes`` (their true aberration classes).
    """
    params = dict(params or {})
    try:
        kind = RecommenderKind(str(kind).upper().replace("_", ""))
    except ValueError:
        raise ConfigError(f"unknown recommender kind {kind!r}", "kind") from None
    if kind in (RecommenderKind.PERFECT, RecommenderKind.UNIFORM):
        return Recommender(kind)
    if kind is RecommenderKind.CONFUSION_TABLE:
        if "matrix" not in params:
            raise ConfigError("CONFUSIONTABLE needs 'matrix'", "matrix")
        m = np.asarray(params["matrix"], dtype=np.float64)
        if m.shape != (4, 4) or np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("confusion matrix must be 4x4 row-stochastic", "matrix")
        w = float(params.get("confidence", 0.6))
        if not 0.25 < w <= 1.0:
            raise ConfigError("confidence must lie in (0.25, 1]", "confidence")
        return Recommender(kind, confusion=m, confidence=w)
    for key in ("probs", "classes"):
        if key not in params:
            raise ConfigError(f"MODELBACKED needs {key!r}", key)
    probs = np.asarray(params["probs"], dtype=np.float64)
    classes = np.array([_class_index(c) for c in params["classes"]])
    if probs.ndim != 2 or probs.shape != (len(classes), 4):
        raise ConfigError("MODELBACKED probs must be n x 4 and match classes", "probs")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ConfigError("MODELBACKED probs rows must be simplex vectors", "probs")
    return Recommender(kind, case_probs=probs, case_classes=classes)


def diagonal_confusion(accuracy: float) -> np.ndarray:
    """Confusion table with ``accuracy`` on the diagonal, errors spread evenly."""
    off = (1.0 - accuracy) / 3.0
    m = np.full((4, 4), off)
    np.fill_diagonal(m, accuracy)
    return m


# --------------------------------------------------------------------------
# Single-case rules


def _class_index(c) -> int:
    if isinstance(c, (int, np.integer)):
        return int(c)
    return ABERRATIONS.index(AberrationClass(c))


def stain_result(
    aberration: AberrationClass | str,
    stain: AberrationClass | str,
    config: WorkflowConfig,
    rng: np.random.Generator | None = None,
    u: float | None = None,
) -> StainResult:
    """Positive iff the stain targets the case's aberration and does not fail.

    Pass either ``rng`` or a pre-drawn uniform ``u``.
    """
    aberration = AberrationClass(aberration)
    stain = AberrationClass(stain)
    if stain not in STAINS:
        raise ConfigError(f"no IHC stain for {stain.value}", "stain")
    if u is None:
        u = rng.random()
    if aberration is stain and u < 1.0 - config.fn_prob[stain.value]:
        return StainResult.POSITIVE
    return StainResult.NEGATIVE_OR_AMBIGUOUS


def stain_order(strategy: Strategy, rec: np.ndarray | None, config: WorkflowConfig) -> list[int]:
    prevalence = [int(i) for i in config.prevalence_indices]
    if strategy.ordering is Ordering.PREVALENCE:
        return prevalence
    # stable sort keeps prevalence order among equal probabilities
    return sorted(prevalence, key=lambda i: -rec[i])


def simulate_case(
    aberration: AberrationClass | str,
    strategy: Strategy,
    rec: np.ndarray | None,
    config: WorkflowConfig,
    rng: np.random.Generator | None = None,
    stain_u: Sequence[float] | None = None,
) -> CaseOutcome:
    """Work up one case. ``stain_u`` fixes the uniform used by each stain (ALK, ROS1, NTRK)."""
    if stain_u is None:
        stain_u = rng.random(3)
    cost, tat, exams = 0.0, 0.0, 1

    def molecular():
        nonlocal cost, tat, exams
        cost += config.molecular_cost
        tat += config.molecular_days
        exams += 1

    uses_ai = strategy.recommender is not RecommenderRole.NONE
    if uses_ai and rec[OTHER] > config.threshold:
        molecular()
        return CaseOutcome(cost, tat, exams)

    results = [
        stain_result(aberration, s, config, u=stain_u[k]) for k, s in enumerate(STAINS)
    ]
    if strategy.ihc_mode is IhcMode.PARALLEL:
        cost += 3 * config.stain_cost
        tat += config.stain_days
        exams += 1
        if StainResult.POSITIVE not in results:
            molecular()
        return CaseOutcome(cost, tat, exams)

    for k in stain_order(strategy, rec, config):
        cost += config.stain_cost
        tat += config.stain_days
        exams += 1
        if results[k] is StainResult.POSITIVE:
            return CaseOutcome(cost, tat, exams)
    molecular()
    return CaseOutcome(cost, tat, exams)


# --------------------------------------------------------------------------
# Vectorized engine


def _evaluate(
    strategy: Strategy,
    true_idx: np.ndarray,
    rec: np.ndarray | None,
    stain_u: np.ndarray,
    config: WorkflowConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-case (cost, tat, examinations) for arrays of case slots."""
    fn = config.fn_vector
    stain_idx = np.minimum(true_idx, 2)
    is_stain_class = true_idx != OTHER
    positive = np.zeros(stain_u.shape, dtype=bool)
    hit = is_stain_class & (np.take_along_axis(stain_u, stain_idx[..., None], -1)[..., 0] < 1.0 - fn[stain_idx])
    np.put_along_axis(positive, stain_idx[..., None], hit[..., None], axis=-1)
    any_pos = positive.any(axis=-1)

    if strategy.ihc_mode is IhcMode.PARALLEL:
        n_stains = np.full(true_idx.shape, 3)
        batches = np.ones(true_idx.shape, dtype=np.int64)
        stain_days = np.full(true_idx.shape, config.stain_days)
    else:
        prev = config.prevalence_indices
        if strategy.ordering is Ordering.PREVALENCE:
            order = np.broadcast_to(prev, true_idx.shape + (3,))
        else:
            p = rec[..., prev]
            order = prev[np.argsort(-p, axis=-1, kind="stable")]
        pos_in_order = np.take_along_axis(positive, order, axis=-1)
        first = np.argmax(pos_in_order, axis=-1)
        n_stains = np.where(any_pos, first + 1, 3)
        batches = n_stains
        stain_days = n_stains * config.stain_days

    molecular = ~any_pos
    cost = n_stains * config.stain_cost + molecular * config.molecular_cost
    tat = stain_days + molecular * config.molecular_days
    exams = 1 + batches + molecular

    if strategy.recommender is not RecommenderRole.NONE:
        skip = rec[..., OTHER] > config.threshold
        cost = np.where(skip, config.molecular_cost, cost)
        tat = np.where(skip, config.molecular_days, tat)
        exams = np.where(skip, 2, exams)
    return cost.astype(np.float64), tat.astype(np.float64), exams.astype(np.int64)


@dataclass
class StrategySummary:
    mean: dict[str, float]
    lower: dict[str, float]
    upper: dict[str, float]
    per_iteration: np.ndarray  # iterations x 3: total cost, mean tat, mean examinations

    def standard_error(self) -> dict[str, float]:
        n = len(self.per_iteration)
        sd = self.per_iteration.std(axis=0, ddof=1) if n > 1 else np.zeros(3)
        return {m: float(sd[k] / np.sqrt(n)) for k, m in enumerate(METRICS)}


@dataclass
class SimulationSummary:
    strategies: dict[str, StrategySummary]
    config: WorkflowConfig

    def __getitem__(self, name: str) -> StrategySummary:
        return self.strategies[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "metric", "mean", "lo", "hi"])
        for name, s in self.strategies.items():
            for m in METRICS:
                w.writerow([name, m, f"{s.mean[m]:.6f}", f"{s.lower[m]:.6f}", f"{s.upper[m]:.6f}"])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "strategy", "cost", "tat", "examinations"])
        n_iter = self.config.iterations
        for i in range(n_iter):
            for name, s in self.strategies.items():
                c, t, e = s.per_iteration[i]
                w.writerow([i, name, f"{c:.6f}", f"{t:.6f}", f"{e:.6f}"])
        return buf.getvalue()


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Independent substream for one iteration, keyed by (seed, iteration)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, iteration])))


def _draws(n_test: int, config: WorkflowConfig, start: int, stop: int):
    c = config.cases_per_iteration
    case_idx = np.empty((stop - start, c), dtype=np.int64)
    stain_u = np.empty((stop - start, c, 3))
    rec_u = np.empty((stop - start, c))
    for row, i in enumerate(range(start, stop)):
        rng = iteration_rng(config.seed, i)
        case_idx[row] = rng.integers(0, n_test, size=c)
        stain_u[row] = rng.random((c, 3))
        rec_u[row] = rng.random(c)
    return case_idx, stain_u, rec_u


def _test_classes(test_cases: Sequence) -> np.ndarray:
    out = []
    for c in test_cases:
        if isinstance(c, LesionCase):
            if c.lineage is not Lineage.SPITZ:
                raise ConfigError(f"case {c.case_id} is not a Spitz tumor", "test_cases")
            c = c.aberration
        if c is None:
            raise ConfigError("non-Spitz case (no aberration) in simulation input", "test_cases")
        out.append(_class_index(c))
    if not out:
        raise ConfigError("simulation needs at least one Spitz test case", "test_cases")
    return np.array(out, dtype=np.int64)


def run_simulation(
    test_cases: Sequence,
    strategies: Iterable[Strategy] = STANDARD_STRATEGIES,
    config: WorkflowConfig | None = None,
    recommenders: Mapping[str, Recommender] | None = None,
    block: int = 1000,
) -> SimulationSummary:
    """Simulate every strategy over ``config.iterations`` resampled case sets.

    ``test_cases`` are Spitz :class:`LesionCase` objects or aberration classes.
    ``recommenders`` maps ``"AI"`` / ``"PERFECTAI"`` to recommenders; the
    perfect one defaults to :data:`RecommenderKind.PERFECT`.
    """
    config = config or WorkflowConfig()
    strategies = list(strategies)
    classes = _test_classes(test_cases)
    recs = {RecommenderRole.PERFECT_AI: make_recommender("PERFECT")}
    for k, v in (recommenders or {}).items():
        recs[RecommenderRole(str(k).upper().replace("_", ""))] = v
    for s in strategies:
        if s.recommender is not RecommenderRole.NONE and s.recommender not in recs:
            raise ConfigError(f"strategy {s.name} needs an {s.recommender.value} recommender", "recommenders")
    for role, r in recs.items():
        if r.kind is RecommenderKind.MODEL_BACKED and len(r.case_probs) != len(classes):
            raise ConfigError(f"{role.value} recommender covers {len(r.case_probs)} cases, test set has {len(classes)}")

    n_iter = config.iterations
    per_iter = {s.name: np.empty((n_iter, 3)) for s in strategies}
    for start in range(0, n_iter, block):
        stop = min(n_iter, start + block)
        case_idx, stain_u, rec_u = _draws(len(classes), config, start, stop)
        true_idx = classes[case_idx]
        rec_out = {
            role: r.outputs(true_idx, case_idx, rec_u) for role, r in recs.items()
            if any(s.recommender is role for s in strategies)
        }
        for s in strategies:
            rec = rec_out.get(s.recommender)
            cost, tat, exams = _evaluate(s, true_idx, rec, stain_u, config)
            per_iter[s.name][start:stop, 0] = cost.sum(axis=1)
            per_iter[s.name][start:stop, 1] = tat.mean(axis=1)
            per_iter[s.name][start:stop, 2] = exams.mean(axis=1)

    out = {}
    for name, arr in per_iter.items():
        lo = np.percentile(arr, 2.5, axis=0)
        hi = np.percentile(arr, 97.5, axis=0)
        mean = arr.mean(axis=0)
        out[name] = StrategySummary(
            mean={m: float(mean[k]) for k, m in enumerate(METRICS)},
            lower={m: float(lo[k]) for k, m in enumerate(METRICS)},
            upper={m: float(hi[k]) for k, m in enumerate(METRICS)},
            per_iteration=arr,
        )
    return SimulationSummary(out, config)


# --------------------------------------------------------------------------
# Closed-form oracle


def _branch_outcome(true_class: int, rec: np.ndarray | None, strategy: Strategy, config: WorkflowConfig):
    """Expected (cost, tat, exams) for one true class and fixed recommendation."""
    s, sd = config.stain_cost, config.stain_days
    m, md = config.molecular_cost, config.molecular_days
    if strategy.recommender is not RecommenderRole.NONE and rec[OTHER] > config.threshold:
        return np.array([m, md, 2.0])
    p_pos = 0.0 if true_class == OTHER else 1.0 - config.fn_vector[true_class]
    if strategy.ihc_mode is IhcMode.PARALLEL:
        hit = np.array([3 * s, sd, 2.0])
        miss = np.array([3 * s + m, sd + md, 3.0])
    else:
        miss = np.array([3 * s + m, 3 * sd + md, 5.0])
        if true_class == OTHER:
            hit = miss
        else:
            j = stain_order(strategy, rec, config).index(true_class) + 1
            hit = np.array([j * s, j * sd, 1.0 + j])
    return p_pos * hit + (1.0 - p_pos) * miss


def analytic_expectation(
    distribution: Mapping[str, float] | Sequence[float],
    strategy: Strategy,
    config: WorkflowConfig,
    recommender: Recommender | None = None,
) -> CaseOutcome:
    """Exact expected per-case (cost, tat, examinations).

    Enumerates true class, recommendation, and stain outcome. For a
    ``MODELBACKED`` recommender pass the empirical class distribution of its
    test cases.
    """
    if isinstance(distribution, Mapping):
        dist = np.array([float(distribution.get(a.value, 0.0)) for a in ABERRATIONS])
    else:
        dist = np.asarray(distribution, dtype=np.float64)
    if dist.shape != (4,) or np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
        raise ConfigError("distribution must be a simplex over ALK, ROS1, NTRK, OTHER")
    if strategy.recommender is not RecommenderRole.NONE and recommender is None:
        if strategy.recommender is RecommenderRole.PERFECT_AI:
            recommender = make_recommender("PERFECT")
        else:
            raise ConfigError(f"strategy {strategy.name} needs a recommender")
    total = np.zeros(3)
    for c in range(4):
        if dist[c] == 0:
            continue
        if strategy.recommender is RecommenderRole.NONE:
            total += dist[c] * _branch_outcome(c, None, strategy, config)
            continue
        for w, vec in recommender.branches(c):
            total += dist[c] * w * _branch_outcome(c, vec, strategy, config)
    return CaseOutcome(float(total[0]), float(total[1]), float(total[2]))


def empirical_distribution(test_cases: Sequence) -> np.ndarray:
    classes = _test_classes(test_cases)
    return np.bincount(classes, minlength=4) / len(classes)


def reference_test_set(n: int = 1000, probs: Mapping[str, float] | None = None) -> list[AberrationClass]:
    """Deterministic class list whose empirical distribution matches ``probs``.

    Counts are rounded with the residue going to ``OTHER``.
    """
    from .cohort import REFERENCE_ABERRATION_PROBS

    probs = probs or REFERENCE_ABERRATION_PROBS
    unknown = set(probs) - {a.value for a in ABERRATIONS}
    if unknown:
        raise ConfigError(f"unknown aberration classes {sorted(unknown)}", "distribution")
    p = {a: float(probs.get(a.value, 0.0)) for a in ABERRATIONS}
    if any(v < 0 for v in p.values()) or abs(sum(p.values()) - 1.0) > 1e-6:
        raise ConfigError("distribution must be nonnegative and sum to 1", "distribution")
    if n < 1:
        raise ConfigError("n_cases must be >= 1", "n_cases")
    counts = {a: int(round(p[a] * n)) for a in ABERRATIONS if a is not AberrationClass.OTHER}
    counts[AberrationClass.OTHER] = n - sum(counts.values())
    return [a for a in ABERRATIONS for _ in range(counts[a])]
