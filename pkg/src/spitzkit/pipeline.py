"""Run-level plumbing behind the CLI: data directories, tasks, commands.

A data directory written by :func:`run_synth` holds::

    cohort.jsonl          one LesionCase per line
    bags/<bag_id>.spzb    feature bags
    bags_manifest.json    bag_id -> path relative to the data directory
    split.json            written by run_split
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import ConfigError, SpitzkitError, __version__
from .bags import BagSynthSpec, FeatureBag, read_bag, synth_bag, write_bag
from .clinical import encode_clinical, fit_logreg, fusion_features
from .cohort import (
    AberrationClass,
    CohortSpec,
    DiagnosticCategory,
    LesionCase,
    Lineage,
    REFERENCE_ABERRATION_PROBS,
    SlideKind,
    Split,
    dumps_cohort,
    loads_cohort,
    sample_cohort,
    split_dataset,
    subtype_key,
)
from .metrics import EvalSet, evaluate_rows, write_report
from .milnet import (
    Example,
    MilConfig,
    MilModel,
    TrainConfig,
    build_model,
    load_checkpoint,
    predict_case,
    save_checkpoint,
    train,
    tune_threshold,
)
from .simflow import (
    STANDARD_STRATEGIES,
    Strategy,
    WorkflowConfig,
    diagonal_confusion,
    make_recommender,
    run_simulation,
    reference_test_set,
)


class MissingArtifactError(SpitzkitError, FileNotFoundError):
    """A referenced input file does not exist."""


# --------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True)
class Task:
    name: str
    classes: tuple[str, ...]
    spitz_only: bool

    def includes(self, case: LesionCase) -> bool:
        return not self.spitz_only or case.lineage is Lineage.SPITZ

    def label(self, case: LesionCase) -> int:
        if self.name == "lineage":
            value = case.lineage.value
        elif self.name == "aberration":
            value = case.aberration.value
        else:
            value = case.category.value
        return self.classes.index(value)


TASKS = {
    "lineage": Task("lineage", (Lineage.CONVENTIONAL_MELANOMA.value, Lineage.SPITZ.value), False),
    "aberration": Task("aberration", tuple(a.value for a in AberrationClass), True),
    "category": Task("category", tuple(c.value for c in DiagnosticCategory), True),
}


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; choose from {sorted(TASKS)}", "task") from None


# subtype index used as the synthetic bag class: CM, then Spitz by aberration
SUBTYPES = (Lineage.CONVENTIONAL_MELANOMA.value,) + tuple(f"SPITZ-{a.value}" for a in AberrationClass)


# --------------------------------------------------------------------------
# Files


def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out: Path, command: str, config: Mapping, seed: int | None, outputs: Sequence[Path]) -> None:
    entries = {}
    for p in outputs:
        entries[str(Path(p).relative_to(out))] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
    manifest = {
        "command": command,
        "config_sha256": config_hash(config),
        "seed": seed,
        "versions": {
            "spitzkit": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
            "python": platform.python_version(),
        },
        "created": datetime.now(timezone.utc).isoformat(),
        "outputs": entries,
    }
    atomic_write(out / f"manifest-{command}.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class DataDir:
    root: Path
    cases: list[LesionCase]
    bag_paths: dict[str, str]

    @classmethod
    def open(cls, root) -> DataDir:
        root = Path(root)
        cohort = root / "cohort.jsonl"
        if not cohort.exists():
            raise MissingArtifactError(f"missing cohort file {cohort}")
        cases = loads_cohort(cohort.read_text())
        return cls(root, cases, read_json(root / "bags_manifest.json"))

    @property
    def by_id(self) -> dict[str, LesionCase]:
        return {c.case_id: c for c in self.cases}

    def split(self) -> Split:
        path = self.root / "split.json"
        if not path.exists():
            raise MissingArtifactError(f"missing split file {path}; run 'split' first")
        return Split.from_dict(read_json(path))

    def load_bag(self, case: LesionCase, kind: SlideKind) -> FeatureBag:
        bag_id = case.bag_refs[kind]
        rel = self.bag_paths.get(bag_id)
        path = self.root / rel if rel else None
        if path is None or not path.exists():
            raise MissingArtifactError(f"missing bag file for bag_id {bag_id}")
        return read_bag(path.read_bytes(), bag_id, case.case_id, kind)

    def case_bags(self, case: LesionCase, kinds: Sequence[SlideKind] | None = None) -> list[FeatureBag]:
        kinds = kinds or sorted(case.bag_refs)
        return [self.load_bag(case, k) for k in kinds if k in case.bag_refs]

    def check_bags(self, cases: Sequence[LesionCase]) -> None:
        missing = [
            bag_id for c in cases for bag_id in c.bag_refs.values()
            if bag_id not in self.bag_paths or not (self.root / self.bag_paths[bag_id]).exists()
        ]
        if missing:
            raise MissingArtifactError(f"missing bag files for bag_ids: {', '.join(sorted(missing))}")


# --------------------------------------------------------------------------
# Commands


def run_synth(config: Mapping, seed: int | None, out: Path) -> list[Path]:
    """Sample a cohort and one synthetic bag per slide reference."""
    if "cohort" not in config:
        raise ConfigError("missing required field 'cohort'", "cohort")
    cohort_cfg = dict(config["cohort"])
    if seed is not None:
        cohort_cfg["seed"] = seed
    spec = CohortSpec.from_dict(cohort_cfg)
    cases = sample_cohort(spec)

    bag_cfg = dict(config.get("bags", {}))
    known = {"dim", "separation", "sigma", "signal_fraction", "tiles_min", "tiles_max", "slide_shift"}
    if set(bag_cfg) - known:
        bad = sorted(set(bag_cfg) - known)[0]
        raise ConfigError(f"unknown bags field {bad!r}", bad)
    dim = int(bag_cfg.get("dim", 64))
    sigma = float(bag_cfg.get("sigma", 1.0))
    shift = float(bag_cfg.get("slide_shift", 0.0))
    synth = BagSynthSpec.separated(
        dim, len(SUBTYPES), float(bag_cfg.get("separation", 10.0)), sigma, seed=spec.seed,
        signal_fraction=float(bag_cfg.get("signal_fraction", 0.25)),
        tiles_min=int(bag_cfg.get("tiles_min", 16)), tiles_max=int(bag_cfg.get("tiles_max", 64)),
    )
    if shift:
        direction = np.random.default_rng([spec.seed, 99]).standard_normal(dim)
        synth.slide_shift = {"CONSULTATION": direction / np.linalg.norm(direction) * shift * sigma}

    out = Path(out)
    written = [out / "cohort.jsonl"]
    atomic_write(written[0], dumps_cohort(cases))
    manifest = {}
    for i, case in enumerate(cases):
        cls = SUBTYPES.index(subtype_key(case))
        for j, (kind, bag_id) in enumerate(sorted(case.bag_refs.items())):
            rng = np.random.default_rng([spec.seed, i, j])
            bag = synth_bag(synth, cls, rng, bag_id, case.case_id, kind)
            rel = f"bags/{bag_id}.spzb"
            atomic_write(out / rel, write_bag(bag))
            written.append(out / rel)
            manifest[bag_id] = rel
    atomic_write(out / "bags_manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    written.append(out / "bags_manifest.json")
    return written


def run_split(config: Mapping, seed: int | None, data: Path) -> list[Path]:
    dd = DataDir.open(data)
    split = split_dataset(
        dd.cases,
        dev_fraction=float(config.get("dev_fraction", 0.75)),
        n_folds=int(config.get("n_folds", 5)),
        seed=int(seed if seed is not None else config.get("seed", 0)),
    )
    path = Path(data) / "split.json"
    atomic_write(path, json.dumps(split.to_dict(), indent=1) + "\n")
    return [path]


def _examples(dd: DataDir, ids: Sequence[str], task: Task) -> list[Example]:
    from .bags import pool_bags

    out = []
    by_id = dd.by_id
    for cid in ids:
        case = by_id[cid]
        if task.includes(case):
            out.append(Example(cid, pool_bags(dd.case_bags(case)), task.label(case)))
    return out


def balanced_weights(labels: Sequence[int], n_classes: int) -> list[float]:
    counts = np.bincount(np.asarray(labels), minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        raise ConfigError("balanced class weights need every class in the training folds", "class_weights")
    return (len(labels) / (n_classes * counts)).tolist()


def run_train(
    config: Mapping, seed: int | None, data: Path, fold: int, profile: str, out: Path
) -> tuple[list[Path], MilModel]:
    task = get_task(config.get("task", "lineage"))
    dd = DataDir.open(data)
    split = dd.split()
    if not 0 <= fold < len(split.folds):
        raise ConfigError(f"fold {fold} outside [0, {len(split.folds)})", "fold")
    by_id = dd.by_id
    dd.check_bags([by_id[i] for f in split.folds for i in f])
    folds = [_examples(dd, f, task) for f in split.folds]
    input_dim = folds[0][0].tiles.shape[1] if folds[0] else 0

    train_kw = dict(config.get("train", {}))
    if seed is not None:
        train_kw["seed"] = seed
    weights = train_kw.pop("class_weights", "balanced" if task.name == "category" else None)
    if weights == "balanced":
        labels = [ex.label for k, f in enumerate(folds) if k != fold for ex in f]
        weights = balanced_weights(labels, len(task.classes))
    try:
        tcfg = TrainConfig.preset(profile, class_weights=weights, **train_kw)
        mcfg = MilConfig.preset(profile, input_dim, len(task.classes), **config.get("mil", {}))
    except TypeError as e:
        raise ConfigError(f"bad train/mil config: {e}") from None
    model = build_model(mcfg, seed=tcfg.seed + fold)
    best, log = train(model, folds, fold, tcfg)

    out = Path(out)
    ckpt = out / f"fold{fold}.spzm"
    csv_path = out / f"train_log_fold{fold}.csv"
    atomic_write(ckpt, save_checkpoint(best))
    atomic_write(csv_path, log.to_csv())
    return [ckpt, csv_path], best


def load_models(paths: Sequence[Path]) -> list[MilModel]:
    models = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise MissingArtifactError(f"missing checkpoint {p}")
        models.append(load_checkpoint(p.read_bytes()))
    if not models:
        raise ConfigError("no checkpoints given", "checkpoints")
    cfgs = {json.dumps(vars(m.config), sort_keys=True) for m in models}
    if len(cfgs) != 1:
        raise ConfigError("checkpoints do not share a MilConfig", "checkpoints")
    return models


def _check_task(models: Sequence[MilModel], task: Task) -> None:
    if models[0].config.n_classes != len(task.classes):
        raise ConfigError(
            f"checkpoints predict {models[0].config.n_classes} classes, task {task.name} has {len(task.classes)}",
            "task",
        )


def _predict(models, dd: DataDir, cases, kinds=None, seed: int = 0):
    preds = []
    for k, case in enumerate(cases):
        rng = np.random.default_rng([seed, k])
        preds.append(predict_case(models, dd.case_bags(case, kinds), rng=rng, case_id=case.case_id))
    return preds


def run_tune_threshold(
    config: Mapping, data: Path, checkpoints: Sequence[Path], folds: Sequence[int], out: Path
) -> list[Path]:
    """Pool each model's predictions on its own validation fold and tune one threshold."""
    task = get_task(config.get("task", "lineage"))
    if len(task.classes) != 2:
        raise ConfigError("threshold tuning applies to binary tasks only", "task")
    if len(folds) != len(checkpoints):
        raise ConfigError("give one fold index per checkpoint", "folds")
    models = load_models(checkpoints)
    _check_task(models, task)
    dd = DataDir.open(data)
    split = dd.split()
    by_id = dd.by_id
    scores, labels = [], []
    for model, fold in zip(models, folds):
        if not 0 <= fold < len(split.folds):
            raise ConfigError(f"fold {fold} outside [0, {len(split.folds)})", "fold")
        cases = [by_id[i] for i in split.folds[fold] if task.includes(by_id[i])]
        for case, pred in zip(cases, _predict([model], dd, cases)):
            scores.append(pred.probs[1])
            labels.append(task.label(case))
    threshold = tune_threshold(scores, labels)
    path = Path(out) / "threshold.json"
    atomic_write(path, json.dumps({"task": task.name, "threshold": threshold}, indent=1) + "\n")
    return [path]


def run_evaluate(
    config: Mapping,
    seed: int | None,
    data: Path,
    checkpoints: Sequence[Path],
    out: Path,
    threshold: float | None = None,
) -> list[Path]:
    """Bootstrap accuracy/AUROC rows per slide kind for clinical, MIL and fusion models."""
    task = get_task(config.get("task", "lineage"))
    R = int(config.get("bootstrap_samples", 10_000))
    seed = int(seed if seed is not None else config.get("seed", 0))
    models = load_models(checkpoints)
    _check_task(models, task)
    if threshold is not None and len(task.classes) != 2:
        raise ConfigError("threshold applies to binary tasks only", "threshold")
    dd = DataDir.open(data)
    split = dd.split()
    by_id = dd.by_id
    dev = [by_id[i] for i in split.dev_ids() if task.includes(by_id[i])]
    test = [by_id[i] for i in split.test if task.includes(by_id[i])]
    dd.check_bags(dev + test)
    if not test:
        raise ConfigError(f"no test cases for task {task.name}", "task")
    y_dev = [task.label(c) for c in dev]
    n_classes = len(task.classes)
    with_clinical = bool(config.get("clinical", True)) and len(set(y_dev)) > 1

    if with_clinical:
        clin = fit_logreg([encode_clinical(c.clinical) for c in dev], y_dev, n_classes=n_classes)
        dev_preds = _predict(models, dd, dev, seed=seed)
        fusion = fit_logreg(
            [fusion_features(c.clinical, p.penultimate) for c, p in zip(dev, dev_preds)],
            y_dev, n_classes=n_classes,
        )

    rows = []
    for kind in (SlideKind.INTERNAL, SlideKind.CONSULTATION):
        cases = [c for c in test if kind in c.bag_refs]
        if not cases:
            continue
        ids = [c.case_id for c in cases]
        y = [task.label(c) for c in cases]
        preds = _predict(models, dd, cases, [kind], seed=seed)
        sets = {"mil": np.array([p.probs for p in preds])}
        if with_clinical:
            sets["clinical"] = clin.predict_proba([encode_clinical(c.clinical) for c in cases])
            sets["fusion"] = fusion.predict_proba(
                [fusion_features(c.clinical, p.penultimate) for c, p in zip(cases, preds)]
            )
        for name in ("clinical", "mil", "fusion"):
            if name not in sets:
                continue
            es = EvalSet.from_probs(ids, y, sets[name], threshold if name == "mil" else None)
            rows += evaluate_rows(task.name, name, kind.value, es, task.classes, R=R, seed=seed)
    path = Path(out) / f"metrics_{task.name}.csv"
    atomic_write(path, write_report(rows))
    return [path]


def _test_set_for_simulation(spec: Mapping) -> list:
    if "distribution" in spec:
        return reference_test_set(int(spec.get("n_cases", 1000)), spec["distribution"])
    if "data" in spec:
        dd = DataDir.open(spec["data"])
        split = dd.split()
        by_id = dd.by_id
        return [by_id[i] for i in split.test if by_id[i].lineage is Lineage.SPITZ]
    raise ConfigError("test_set needs 'distribution' or 'data'", "test_set")


def build_recommender(spec: Mapping, test_cases: Sequence):
    if "kind" not in spec:
        raise ConfigError("recommender spec missing 'kind'", "kind")
    kind = str(spec["kind"]).upper().replace("_", "")
    params = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "MODELBACKED" and "probs" not in params:
        models = load_models([Path(p) for p in params.get("checkpoints", [])])
        _check_task(models, TASKS["aberration"])
        if not test_cases or not isinstance(test_cases[0], LesionCase):
            raise ConfigError("MODELBACKED recommender needs a 'data' test set", "test_set")
        dd = DataDir.open(params["data"])
        dd.check_bags(test_cases)
        preds = _predict(models, dd, test_cases)
        params = {"probs": [p.probs for p in preds], "classes": [c.aberration.value for c in test_cases]}
    return make_recommender(kind, params)


# stand-in AI: 0.55 aberration accuracy, errors spread evenly
DEFAULT_RECOMMENDERS = {
    "AI": {"kind": "CONFUSIONTABLE", "matrix": diagonal_confusion(0.55).tolist(), "confidence": 0.6},
    "PERFECTAI": {"kind": "PERFECT"},
}


def run_simulate(config: Mapping, seed: int | None, out: Path, trace: bool = False) -> list[Path]:
    wf = dict(config.get("workflow", {}))
    if seed is not None:
        wf["seed"] = seed
    wcfg = WorkflowConfig.from_dict(wf)
    if "strategies" in config:
        strategies = [Strategy.from_dict(s) for s in config["strategies"]]
    else:
        strategies = list(STANDARD_STRATEGIES)
    test_cases = _test_set_for_simulation(config.get("test_set", {"distribution": REFERENCE_ABERRATION_PROBS}))
    rec_specs = config.get("recommenders", DEFAULT_RECOMMENDERS)
    recs = {role: build_recommender(spec, test_cases) for role, spec in rec_specs.items()}
    summary = run_simulation(test_cases, strategies, wcfg, recs)
    out = Path(out)
    written = [out / "simulation.csv"]
    atomic_write(written[0], summary.to_csv())
    if trace:
        written.append(out / "simulation_trace.csv")
        atomic_write(written[1], summary.trace_csv())
    return written


def run_report(inputs: Sequence[Path], out: Path) -> list[Path]:
    """Render metrics and simulation CSVs as Markdown tables."""
    import csv

    lines = []
    for p in inputs:
        p = Path(p)
        if not p.exists():
            raise MissingArtifactError(f"missing report input {p}")
        rows = list(csv.DictReader(p.read_text().splitlines()))
        if not rows:
            continue
        if "strategy" in rows[0]:
            lines += _simulation_table(p.name, rows)
        else:
            lines += _metrics_table(p.name, rows)
    path = Path(out) / "report.md"
    atomic_write(path, "\n".join(lines) + "\n")
    return [path]


def _fmt(point: str, lo: str, hi: str, digits: int = 2) -> str:
    return f"{float(point):.{digits}f} ({float(lo):.{digits}f}-{float(hi):.{digits}f})"


def _metrics_table(title: str, rows) -> list[str]:
    kinds = sorted({r["slide_kind"] for r in rows}, key=lambda k: k != "INTERNAL")
    out = [f"## {title}", "", "| model | metric | class | " + " | ".join(kinds) + " |",
           "|---|---|---|" + "---|" * len(kinds)]
    keys = []
    for r in rows:
        key = (r["model"], r["metric"], r["class"])
        if key not in keys:
            keys.append(key)
    for key in keys:
        cells = []
        for k in kinds:
            match = [r for r in rows if (r["model"], r["metric"], r["class"]) == key and r["slide_kind"] == k]
            cells.append(_fmt(match[0]["point"], match[0]["lo"], match[0]["hi"]) if match else "-")
        out.append(f"| {key[0]} | {key[1]} | {key[2]} | " + " | ".join(cells) + " |")
    return out + [""]


def _simulation_table(title: str, rows) -> list[str]:
    modes = ["parallel", "sequential-prevalence", "sequential-predprob"]
    out = [f"## {title}", ""]
    for metric, digits in (("cost", 0), ("tat", 2), ("examinations", 2)):
        out += [f"### {metric}", "", "| recommender | " + " | ".join(modes) + " |", "|---|" + "---|" * len(modes)]
        for rec in ("none", "ai", "perfectai"):
            cells = []
            for mode in modes:
                match = [r for r in rows if r["strategy"] == f"{mode}/{rec}" and r["metric"] == metric]
                cells.append(_fmt(match[0]["mean"], match[0]["lo"], match[0]["hi"], digits) if match else "-")
            if any(c != "-" for c in cells):
                out.append(f"| {rec} | " + " | ".join(cells) + " |")
        out.append("")
    return out
