"""Multi-modal teacher -> pseudo-label -> uni-modal student pipeline.

The teacher sees the raw input together with the ground truth of the
abundant ("source") task and is trained on the samples that carry both
labels.  Its predictions for the scarce ("target") task fill in the missing
labels, and the student is trained on ground truth plus pseudo-labels.
Running this in both directions yields the task-interaction verdict.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .autodiff import softmax
from .metrics import HIGHER_IS_BETTER, MetricsReport, improvement_ratio
from .model import (
    ConfigError,
    MultiModalTeacher,
    NetworkConfig,
    TaskHeadSpec,
    build_student,
    build_teacher,
    predict,
)
from .tasks import ImbalancedDataset, SampleSet
from .training import (
    DEFAULT_METRICS,
    DivergenceError,
    TrainingConfig,
    evaluate,
    teacher_input_fn,
    train,
)

log = logging.getLogger(__name__)

DIRECTIONS = ("task1_as_input", "task2_as_input")
CONFIGURATIONS = ("st", "mtl", "teacher", "ts")
SIGNIFICANCE = 0.05


class IntegrityError(ValueError):
    """A pseudo-label would overwrite a ground-truth label."""


@dataclass
class DistillConfig:
    tau: float = 0.9
    teacher: TrainingConfig = field(default_factory=TrainingConfig)
    student: TrainingConfig = field(default_factory=TrainingConfig)
    direction: str = "task1_as_input"
    backbone: list[int] = field(default_factory=lambda: [128, 128, 128, 128])
    activation: str = "tanh"
    # "multi": student has every task head; "single": only the target head
    student_heads: str = "multi"
    metrics: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}")
        if self.student_heads not in ("multi", "single"):
            raise ConfigError("student_heads must be 'multi' or 'single'")
        if isinstance(self.teacher, dict):
            self.teacher = TrainingConfig(**self.teacher)
        if isinstance(self.student, dict):
            self.student = TrainingConfig(**self.student)

    @property
    def source(self) -> int:
        return DIRECTIONS.index(self.direction)

    @property
    def target(self) -> int:
        return 1 - self.source

    def to_dict(self) -> dict:
        return asdict(self)


def _heads(dataset: ImbalancedDataset, tasks: Sequence[int]) -> list[TaskHeadSpec]:
    return [TaskHeadSpec(dataset.task_names[t], dataset.kinds[t], dataset.output_dim(t)) for t in tasks]


def _with_seed(tc: TrainingConfig, seed: int) -> TrainingConfig:
    return replace(tc, seed=seed)


def student_config(dataset: ImbalancedDataset, config: DistillConfig, tasks: Sequence[int],
                   seed: int) -> NetworkConfig:
    return NetworkConfig([dataset.train.z.shape[1]], list(config.backbone), _heads(dataset, tasks),
                         config.activation, seed)


def teacher_config(dataset: ImbalancedDataset, config: DistillConfig, seed: int) -> NetworkConfig:
    src = config.source
    src_dim = dataset.n_classes.get(src, 1)
    return NetworkConfig([dataset.train.z.shape[1], src_dim], list(config.backbone),
                         _heads(dataset, [0, 1]), config.activation, seed)


def both_labeled(samples: SampleSet) -> np.ndarray:
    return np.flatnonzero(np.all(np.stack(samples.masks), axis=0))


def train_teacher(dataset: ImbalancedDataset, config: DistillConfig, seed: Optional[int] = None):
    """Fit a teacher on the both-labeled subset; returns ``(teacher, history)``."""
    idx = both_labeled(dataset.train)
    if idx.size == 0:
        raise ConfigError("teacher needs at least one sample carrying both labels")
    seed = config.teacher.seed if seed is None else seed
    teacher = build_teacher(teacher_config(dataset, config, seed))
    return train(teacher, dataset, _with_seed(config.teacher, seed),
                 inputs=teacher_input_fn(dataset, config.source), samples=dataset.train.take(idx))


# --------------------------------------------------------------------------
# pseudo-labels


@dataclass
class PseudoLabelSet:
    """Teacher outputs for the samples missing the target label.

    All generated entries are kept; ``retained`` marks those that pass the
    confidence filter (always true for regression, where ``confidence`` is NaN).
    """

    target: int
    ids: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    retained: np.ndarray
    tau: float
    skipped: int = 0
    teacher_fingerprint: str = ""

    @property
    def n_generated(self) -> int:
        return int(self.ids.size)

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())

    def kept(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        r = self.retained
        return self.ids[r], self.labels[r], self.confidence[r]

    def to_csv(self, path) -> None:
        ids, labels, conf = self.kept()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label", "confidence"])
            for i, y, c in zip(ids, labels, conf):
                w.writerow([int(i), repr(float(y)), "" if np.isnan(c) else repr(float(c))])

    @classmethod
    def empty(cls, target: int, tau: float) -> "PseudoLabelSet":
        z = np.zeros(0)
        return cls(target, z.astype(np.int64), z, z, z.astype(bool), tau)


def fingerprint(net) -> str:
    h = hashlib.sha256()
    for name in sorted(net.params.values):
        h.update(name.encode())
        h.update(np.ascontiguousarray(net.params.values[name]).tobytes())
    return h.hexdigest()[:16]


def select_confident(probs: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Argmax class, its probability, and whether it beats ``tau`` strictly."""
    conf = probs.max(axis=1)
    return probs.argmax(axis=1).astype(np.float64), conf, conf > tau


def generate_pseudo_labels(teacher: MultiModalTeacher, dataset: ImbalancedDataset,
                           config: DistillConfig) -> PseudoLabelSet:
    src, tgt = config.source, config.target
    tr = dataset.train
    missing = ~tr.masks[tgt]
    usable = missing & tr.masks[src]
    skipped = int((missing & ~tr.masks[src]).sum())
    rows = np.flatnonzero(usable)
    if rows.size == 0:
        out = PseudoLabelSet.empty(tgt, config.tau)
        out.skipped = skipped
        return out
    sub = tr.take(rows)
    raw = predict(teacher, teacher_input_fn(dataset, src)(sub))[dataset.task_names[tgt]]
    if dataset.kinds[tgt] == "classification":
        labels, conf, keep = select_confident(softmax(raw), config.tau)
    else:
        labels, conf, keep = raw[:, 0].copy(), np.full(rows.size, np.nan), np.ones(rows.size, bool)
    return PseudoLabelSet(tgt, sub.ids.copy(), labels, conf, keep, config.tau, skipped, fingerprint(teacher))


def merge_with_pseudo(dataset: ImbalancedDataset, pseudo: PseudoLabelSet) -> ImbalancedDataset:
    """Copy of ``dataset`` with retained pseudo-labels filled in for the target task."""
    tr = dataset.train
    ids, labels, _ = pseudo.kept()
    if ids.size == 0:
        return dataset
    t = pseudo.target
    pos = {int(i): k for k, i in enumerate(tr.ids)}
    try:
        rows = np.array([pos[int(i)] for i in ids], dtype=np.int64)
    except KeyError as e:
        raise IntegrityError(f"pseudo-label for unknown sample id {e.args[0]}") from None
    if tr.masks[t][rows].any():
        bad = ids[tr.masks[t][rows]]
        raise IntegrityError(f"pseudo-labels collide with ground truth for ids {bad[:5].tolist()}")
    new_labels = [y.copy() for y in tr.labels]
    new_masks = [m.copy() for m in tr.masks]
    new_pseudo = [p.copy() for p in tr.pseudo]
    new_labels[t][rows] = labels
    new_masks[t][rows] = True
    new_pseudo[t][rows] = True
    return dataset.with_train(SampleSet(tr.z, new_labels, new_masks, new_pseudo, tr.ids))


# --------------------------------------------------------------------------
# comparison across seeds


@dataclass
class ComparisonReport:
    direction: str
    target_task: str
    source_task: str
    seeds: list[int]
    per_seed: dict[int, dict[str, MetricsReport]] = field(default_factory=dict)
    pseudo_counts: dict[int, dict[str, int]] = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)

    def add(self, seed: int, result: dict) -> None:
        self.per_seed[seed] = result["reports"]
        if "pseudo" in result:
            self.pseudo_counts[seed] = result["pseudo"]

    @property
    def ok_seeds(self) -> list[int]:
        return [s for s in self.seeds if s in self.per_seed]

    def values(self, configuration: str, task: str, metric: str) -> np.ndarray:
        return np.array([self.per_seed[s][configuration].get(task, metric) for s in self.ok_seeds
                         if (task, metric) in self.per_seed[s][configuration].values])

    def summary(self, configuration: str, task: str, metric: str) -> tuple[float, float]:
        v = self.values(configuration, task, metric)
        if v.size == 0:
            return float("nan"), float("nan")
        return float(v.mean()), float(v.std())

    def improvement(self, metric: str, baseline: str = "mtl", candidate: str = "ts") -> float:
        """Relative improvement of mean target metric, candidate over baseline."""
        b, _ = self.summary(baseline, self.target_task, metric)
        c, _ = self.summary(candidate, self.target_task, metric)
        return improvement_ratio(b, c, HIGHER_IS_BETTER[metric])

    def per_seed_improvements(self, metric: str) -> np.ndarray:
        hib = HIGHER_IS_BETTER[metric]
        return np.array([improvement_ratio(self.per_seed[s]["mtl"].get(self.target_task, metric),
                                           self.per_seed[s]["ts"].get(self.target_task, metric), hib)
                         for s in self.ok_seeds])


DatasetSource = Union[ImbalancedDataset, Callable[[int], ImbalancedDataset]]


def _metrics_for(dataset: ImbalancedDataset, config: DistillConfig) -> dict[str, list[str]]:
    out = {}
    for name, kind in zip(dataset.task_names, dataset.kinds):
        out[name] = list(config.metrics.get(name, DEFAULT_METRICS[kind]))
    return out


def primary_metric(dataset: ImbalancedDataset, config: DistillConfig, task: int) -> str:
    return _metrics_for(dataset, config)[dataset.task_names[task]][0]


def run_seed(dataset: ImbalancedDataset, config: DistillConfig, seed: int,
             configurations: Sequence[str] = ("st", "mtl", "ts"), keep_nets: bool = False) -> dict:
    """Train and evaluate the requested configurations for one seed.

    ``"ts"`` also trains and reports the teacher.  All networks of a seed share
    the init seed, so ``mtl`` and a multi-head ``ts`` student start identical.
    """
    src, tgt = config.source, config.target
    metrics = _metrics_for(dataset, config)
    tc = _with_seed(config.student, seed)
    nets, reports, out = {}, {}, {}

    if "st" in configurations:
        nets["st"] = build_student(student_config(dataset, config, [tgt], seed))
        train(nets["st"], dataset, tc)
    if "mtl" in configurations:
        nets["mtl"] = build_student(student_config(dataset, config, [0, 1], seed))
        train(nets["mtl"], dataset, tc)
    if "ts" in configurations:
        teacher, _ = train_teacher(dataset, config, seed)
        pseudo = generate_pseudo_labels(teacher, dataset, config)
        merged = merge_with_pseudo(dataset, pseudo)
        tasks = [0, 1] if config.student_heads == "multi" else [tgt]
        nets["teacher"] = teacher
        nets["ts"] = build_student(student_config(dataset, config, tasks, seed))
        train(nets["ts"], merged, tc)
        out["pseudo"] = {"generated": pseudo.n_generated, "retained": pseudo.n_retained,
                         "skipped": pseudo.skipped}
        out["pseudo_set"] = pseudo

    for name, net in nets.items():
        inputs = teacher_input_fn(dataset, src) if name == "teacher" else None
        reports[name] = evaluate(net, dataset, metrics, inputs=inputs)
    out["reports"] = reports
    if keep_nets:
        out["nets"] = nets
    return out


def run_teacher_student(dataset: DatasetSource, config: DistillConfig,
                        seeds: Union[int, Sequence[int]] = 1,
                        configurations: Sequence[str] = ("st", "mtl", "ts")) -> ComparisonReport:
    """Compare ST, MTL and teacher-student (``ts``) over several seeds.

    ``dataset`` is either fixed or a function of the seed.  A seed whose
    training diverges is recorded under ``failures`` and skipped.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    probe = dataset(seeds[0]) if callable(dataset) else dataset
    report = ComparisonReport(config.direction, probe.task_names[config.target],
                              probe.task_names[config.source], seeds)
    for s in seeds:
        ds = dataset(s) if callable(dataset) else dataset
        try:
            res = run_seed(ds, config, s, configurations)
        except DivergenceError as e:
            log.warning("seed %s diverged: %s", s, e)
            report.failures[s] = str(e)
            continue
        report.add(s, res)
    return report


# --------------------------------------------------------------------------
# interaction analysis


@dataclass
class ConditionVerdict:
    """Outcome of running the pipeline in both directions.

    ``improvement_12`` is the relative gain on task 2 when task 1 is the
    teacher's extra input, ``improvement_21`` the converse.
    """

    improvement_12: float
    improvement_21: float
    std_12: float
    std_21: float
    verdict: str
    direction: Optional[str]
    threshold: float
    n_seeds: int
    reports: dict[str, ComparisonReport] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "reports"}
        return d


def decide(imp12: float, imp21: float, threshold: float = SIGNIFICANCE) -> tuple[str, Optional[str]]:
    """Map the two directional improvements to a condition label.

    A one-directional gain is ``Cond2`` when it flows from task 1 to task 2
    (|P| > |S| >= |O| in sub-function terms) and ``Cond2Mirror`` otherwise.
    """
    up12, up21 = imp12 > threshold, imp21 > threshold
    if up12 and up21:
        return "Cond1", None
    if up12:
        return "Cond2", "1->2"
    if up21:
        return "Cond2Mirror", "2->1"
    return "Cond3", None


EXPECTED_VERDICT = {
    "Cond1": ("Cond1", None),
    "Cond2": ("Cond2", "1->2"),
    "Cond2Mirror": ("Cond2Mirror", "2->1"),
    "Cond3": ("Cond3", None),
}


def verdict_from_reports(reports: dict[str, ComparisonReport], metrics: dict[str, str],
                         threshold: float = SIGNIFICANCE) -> ConditionVerdict:
    """Verdict from one ComparisonReport per direction.

    ``metrics`` maps each direction to the target-task metric compared.
    """
    means, stds, n = [], [], 0
    for direction in DIRECTIONS:
        rep = reports[direction]
        imps = rep.per_seed_improvements(metrics[direction])
        means.append(rep.improvement(metrics[direction]) if imps.size else float("nan"))
        stds.append(float(imps.std()) if imps.size else float("nan"))
        n = max(n, len(rep.ok_seeds))
    verdict, direction = decide(means[0], means[1], threshold)
    return ConditionVerdict(means[0], means[1], stds[0], stds[1], verdict, direction, threshold,
                            n, dict(reports))


def analyze_task_interaction(make_dataset: Callable[[int, int], ImbalancedDataset],
                             config: DistillConfig, seeds: Union[int, Sequence[int]] = 5,
                             threshold: float = SIGNIFICANCE) -> ConditionVerdict:
    """Run teacher-student with each task as the teacher's extra input.

    ``make_dataset(seed, abundant)`` returns a dataset where task ``abundant``
    is fully labeled.  A direction counts as helpful when the relative
    improvement of the seed-mean MTL-TS metric over the seed-mean MTL metric
    exceeds ``threshold``; the per-seed spread is reported alongside.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    reports, metrics = {}, {}
    for src, direction in enumerate(DIRECTIONS):
        cfg = replace(config, direction=direction)
        reports[direction] = run_teacher_student(lambda s, a=src: make_dataset(s, a), cfg, seeds)
        metrics[direction] = primary_metric(make_dataset(seeds[0], src), cfg, cfg.target)
    return verdict_from_reports(reports, metrics, threshold)
