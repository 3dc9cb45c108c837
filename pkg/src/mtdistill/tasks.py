"""Task definitions and imbalanced two-task datasets.

Covers the two toy regression functions, scenario tasks built as weighted sums
of shared and private sinusoidal sub-functions, a small depth-plus-segmentation
analog, and CSV import/export of datasets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .model import ConfigError

TOY_EVAL_POINTS = 1000
REFERENCE_POINTS = 100_000
CONDITIONS = ("Cond1", "Cond2", "Cond2Mirror", "Cond3")


class DomainError(ValueError):
    pass


# --------------------------------------------------------------------------
# toy functions


def _check_nonneg(z):
    if np.any(np.asarray(z) < 0):
        raise DomainError("toy functions are defined for z >= 0")


def toy_f1(z):
    """sin(z) + sqrt(z)/300 + 2 + 3 sin(5z) cos(2z)"""
    _check_nonneg(z)
    if np.isscalar(z):
        return math.sin(z) + math.sqrt(z) / 300.0 + 2 + 3 * math.sin(5 * z) * math.cos(2 * z)
    z = np.asarray(z, dtype=np.float64)
    return np.sin(z) + np.sqrt(z) / 300.0 + 2 + 3 * np.sin(5 * z) * np.cos(2 * z)


def toy_f2(z):
    """cos(z/3) + sqrt(z)/200 + 1 - sin(3z) cos(4z)"""
    _check_nonneg(z)
    if np.isscalar(z):
        return math.cos(z / 3) + math.sqrt(z) / 200.0 + 1 - math.sin(3 * z) * math.cos(4 * z)
    z = np.asarray(z, dtype=np.float64)
    return np.cos(z / 3) + np.sqrt(z) / 200.0 + 1 - np.sin(3 * z) * np.cos(4 * z)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    z: np.ndarray
    label_task1: Optional[float] = None
    label_task2: Optional[float] = None


@dataclass
class SampleSet:
    """Column-oriented samples: inputs, per-task labels and presence masks.

    ``labels[t][i]`` is meaningful only where ``masks[t][i]`` is true;
    ``pseudo[t][i]`` marks labels that came from a teacher.
    """

    z: np.ndarray
    labels: list[np.ndarray]
    masks: list[np.ndarray]
    pseudo: list[np.ndarray] = field(default_factory=list)
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim == 1:
            self.z = self.z[:, None]
        n = self.z.shape[0]
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
        self.labels = [np.where(m, np.asarray(y, dtype=np.float64), 0.0)
                       for y, m in zip(self.labels, self.masks)]
        if not self.pseudo:
            self.pseudo = [np.zeros(n, dtype=bool) for _ in self.labels]
        if self.ids is None:
            self.ids = np.arange(n)

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def n_tasks(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.z[idx], [y[idx] for y in self.labels], [m[idx] for m in self.masks],
                         [p[idx] for p in self.pseudo], self.ids[idx])

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            labs = [y[i] if m[i] else None for y, m in zip(self.labels, self.masks)]
            yield Sample(self.z[i], *labs)

    def equals(self, other: "SampleSet") -> bool:
        return (np.array_equal(self.z, other.z) and np.array_equal(self.ids, other.ids)
                and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
                and all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks)))


@dataclass
class ImbalancedDataset:
    """Training samples with unequal label counts per task, plus a labeled eval set.

    ``kinds`` gives ``"regression"`` or ``"classification"`` per task.
    """

    train: SampleSet
    eval_set: SampleSet
    kinds: list[str]
    task_names: list[str] = field(default_factory=lambda: ["task1", "task2"])
    n_classes: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if any(len(self.eval_set) and not m.all() for m in self.eval_set.masks):
            raise ConfigError("eval set must be fully labeled")
        if len(self.train):
            if not np.any(np.stack(self.train.masks), axis=0).all():
                raise ConfigError("every training sample needs at least one label")
        for t, k in self.n_classes.items():
            y = self.train.labels[t][self.train.masks[t]]
            if np.any(y < 0) or np.any(y >= k):
                raise ConfigError(f"task {t}: class index out of range")

    def n_labeled(self, task: int) -> int:
        return int(self.train.masks[task].sum())

    @property
    def count_A(self) -> int:
        """Labels of the abundant task."""
        return max(self.n_labeled(t) for t in range(self.train.n_tasks))

    @property
    def count_B(self) -> int:
        """Samples carrying every task's label."""
        return int(np.all(np.stack(self.train.masks), axis=0).sum())

    @property
    def samples(self) -> list[Sample]:
        return list(self.train.samples())

    def output_dim(self, task: int) -> int:
        return self.n_classes.get(task, 1)

    def with_train(self, train: SampleSet) -> "ImbalancedDataset":
        return replace(self, train=train)

    def swapped(self) -> "ImbalancedDataset":
        """Same data with the task order reversed."""
        def sw(s: SampleSet) -> SampleSet:
            return SampleSet(s.z, s.labels[::-1], s.masks[::-1], s.pseudo[::-1], s.ids)
        nc = {1 - t: k for t, k in self.n_classes.items()}
        return ImbalancedDataset(sw(self.train), sw(self.eval_set), self.kinds[::-1],
                                 self.task_names[::-1], nc)


def _imbalanced(z, y1, y2, n_B, rng, abundant: int = 0):
    """Label all rows for the abundant task and a uniform n_B-subset for the other."""
    n_A = z.shape[0]
    subset = np.zeros(n_A, dtype=bool)
    subset[rng.choice(n_A, size=n_B, replace=False)] = True
    full = np.ones(n_A, dtype=bool)
    masks = [full, subset] if abundant == 0 else [subset, full]
    return SampleSet(z, [y1, y2], masks)


def _check_counts(n_A: int, n_B: int) -> None:
    if n_A < 1 or n_B < 0:
        raise ConfigError("sample counts must be positive")
    if n_B > n_A:
        raise ConfigError(f"n_B ({n_B}) must not exceed n_A ({n_A})")


def toy_eval_grid() -> np.ndarray:
    return np.linspace(0.0, 1.0, TOY_EVAL_POINTS)


def sample_toy_dataset(n_A: int = 640, n_B: int = 160, seed: int = 0) -> ImbalancedDataset:
    _check_counts(n_A, n_B)
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, size=n_A)
    train = _imbalanced(z, toy_f1(z), toy_f2(z), n_B, rng)
    grid = toy_eval_grid()
    ev = SampleSet(grid, [toy_f1(grid), toy_f2(grid)], [np.ones(grid.size, bool)] * 2)
    return ImbalancedDataset(train, ev, ["regression", "regression"], ["f1", "f2"])


# --------------------------------------------------------------------------
# sub-function scenarios


def basis_function(k: int, z):
    return np.sin(k * np.pi * np.asarray(z, dtype=np.float64) + k / 7.0)


@dataclass
class SubFunctionBank:
    """Sinusoidal basis plus the shared/private index sets of two tasks.

    ``shared`` is S = L & M, ``only1`` is O = L - S and ``only2`` is P = M - S.
    Basis indices run from 1 to ``basis_size``.
    """

    basis_size: int
    shared: tuple[int, ...]
    only1: tuple[int, ...]
    only2: tuple[int, ...]
    alpha: dict[int, float]
    beta: dict[int, float]

    @property
    def L(self) -> tuple[int, ...]:
        return self.shared + self.only1

    @property
    def M(self) -> tuple[int, ...]:
        return self.shared + self.only2

    def f1(self, z):
        return sum(self.alpha[k] * basis_function(k, z) for k in self.L)

    def f2(self, z):
        return sum(self.beta[k] * basis_function(k, z) for k in self.M)


def condition_violations(condition: str, s: int, o: int, p: int) -> list[str]:
    """Clauses of ``condition`` that the cardinalities |S|, |O|, |P| break."""
    clauses = {
        "Cond1": [("|S| > |O|", s > o), ("|S| > |P|", s > p)],
        "Cond2": [("|S| > |O|", s > o), ("|P| > |S|", p > s)],
        "Cond2Mirror": [("|S| > |P|", s > p), ("|O| > |S|", o > s)],
        "Cond3": [("|O| > |S|", o > s), ("|P| > |S|", p > s)],
    }
    if condition not in clauses:
        raise ConfigError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    return [f"{condition} requires {text} (got |S|={s}, |O|={o}, |P|={p})"
            for text, ok in clauses[condition] if not ok]


@dataclass
class ScenarioTasks:
    bank: SubFunctionBank
    declared_condition: str

    def f1(self, z):
        return self.bank.f1(z)

    def f2(self, z):
        return self.bank.f2(z)

    @property
    def cardinalities(self) -> tuple[int, int, int]:
        b = self.bank
        return len(b.shared), len(b.only1), len(b.only2)

    def satisfies_condition(self) -> bool:
        return not condition_violations(self.declared_condition, *self.cardinalities)


def build_condition_scenario(condition: str, basis_size: int, cardinalities: Sequence[int],
                             seed: int = 0) -> ScenarioTasks:
    s, o, p = (int(c) for c in cardinalities)
    if min(s, o, p) < 0:
        raise ConfigError("cardinalities must be non-negative")
    if s + o + p > basis_size:
        raise ConfigError(f"|S|+|O|+|P| = {s + o + p} exceeds basis size {basis_size}")
    bad = condition_violations(condition, s, o, p)
    if bad:
        raise ConfigError("; ".join(bad))
    rng = np.random.default_rng(seed)
    idx = [int(k) for k in rng.permutation(np.arange(1, basis_size + 1))[: s + o + p]]
    shared, only1, only2 = tuple(idx[:s]), tuple(idx[s:s + o]), tuple(idx[s + o:])
    alpha = {k: float(rng.uniform(0.5, 1.5)) for k in shared + only1}
    beta = {k: float(rng.uniform(0.5, 1.5)) for k in shared + only2}
    bank = SubFunctionBank(basis_size, shared, only1, only2, alpha, beta)
    return ScenarioTasks(bank, condition)


def sample_scenario_dataset(scenario: ScenarioTasks, n_A: int, n_B: int, seed: int = 0,
                            abundant: int = 0) -> ImbalancedDataset:
    """Draw z ~ U[0,1]; task ``abundant`` is labeled everywhere, the other on n_B rows."""
    _check_counts(n_A, n_B)
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, size=n_A)
    train = _imbalanced(z, scenario.f1(z), scenario.f2(z), n_B, rng, abundant)
    grid = toy_eval_grid()
    ev = SampleSet(grid, [scenario.f1(grid), scenario.f2(grid)], [np.ones(grid.size, bool)] * 2)
    return ImbalancedDataset(train, ev, ["regression", "regression"], ["f1", "f2"])


# --------------------------------------------------------------------------
# depth + segmentation analog


SEG_REFERENCE_SEED = 12345


def depth_field(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    return 3.0 + basis_function(1, z[:, 0]) + basis_function(2, z[:, 1])


def segmentation_field(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    return depth_field(z) + 0.25 * np.sin(3.0 * np.pi * z[:, 0] * z[:, 1])


def segmentation_edges(n_classes: int) -> np.ndarray:
    """Inner quantile edges of the segmentation field on a fixed reference sample."""
    ref = np.random.default_rng(SEG_REFERENCE_SEED).uniform(0.0, 1.0, size=(REFERENCE_POINTS, 2))
    return np.quantile(segmentation_field(ref), np.arange(1, n_classes) / n_classes)


def segment(z: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, segmentation_field(z), side="right").astype(np.float64)


def build_synth_segmentation(n_classes: int = 4, n_A: int = 500, n_B: int = 250, seed: int = 0,
                             n_eval: int = 1000, abundant: int = 0) -> ImbalancedDataset:
    """Depth-like regression (task 1) and quantile-binned classification (task 2) on [0,1]^2."""
    if n_classes < 2:
        raise ConfigError("n_classes must be at least 2")
    _check_counts(n_A, n_B)
    edges = segmentation_edges(n_classes)
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 1.0, size=(n_A, 2))
    train = _imbalanced(z, depth_field(z), segment(z, edges), n_B, rng, abundant)
    ez = np.random.default_rng(SEG_REFERENCE_SEED + 1).uniform(0.0, 1.0, size=(n_eval, 2))
    ev = SampleSet(ez, [depth_field(ez), segment(ez, edges)], [np.ones(n_eval, bool)] * 2)
    return ImbalancedDataset(train, ev, ["regression", "classification"], ["depth", "seg"],
                             {1: n_classes})


# --------------------------------------------------------------------------
# delimited text


def _fmt(x: float) -> str:
    return repr(float(x))


def export_samples(samples: SampleSet, path, kinds: Sequence[str] = ("regression", "regression")) -> None:
    """One row per sample: z0..zd, label1, label2 (empty when absent)."""
    d = samples.z.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{j}" for j in range(d)] + [f"label{t + 1}" for t in range(samples.n_tasks)])
        for i in range(len(samples)):
            row = [_fmt(v) for v in samples.z[i]]
            for t in range(samples.n_tasks):
                if not samples.masks[t][i]:
                    row.append("")
                elif kinds[t] == "classification":
                    row.append(str(int(samples.labels[t][i])))
                else:
                    row.append(_fmt(samples.labels[t][i]))
            w.writerow(row)


def import_samples(path) -> SampleSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    zcols = [j for j, h in enumerate(header) if h.startswith("z")]
    lcols = [j for j, h in enumerate(header) if h.startswith("label")]
    z = np.array([[float(r[j]) for j in zcols] for r in body], dtype=np.float64).reshape(len(body), len(zcols))
    labels, masks = [], []
    for j in lcols:
        masks.append(np.array([r[j] != "" for r in body], dtype=bool))
        labels.append(np.array([float(r[j]) if r[j] != "" else 0.0 for r in body]))
    return SampleSet(z, labels, masks)


def export_dataset(ds: ImbalancedDataset, out_dir, stem: str = "dataset") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}_train.csv", out / f"{stem}_eval.csv"]
    export_samples(ds.train, paths[0], ds.kinds)
    export_samples(ds.eval_set, paths[1], ds.kinds)
    return paths
