"""Mini-batch Adam training with masked multi-task loss, and evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import ComputeGraph, OptimizerState, adam_step, backward, masked_multitask_loss
from .metrics import MetricsReport, compute_metric, squared_error_std
from .model import ConfigError, _Net, predict
from .tasks import ImbalancedDataset, SampleSet

DEFAULT_LOSS = {"regression": "mse", "classification": "cross_entropy"}
DEFAULT_METRICS = {"regression": ("mse", "rmse"), "classification": ("miou",)}


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"non-finite loss in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 3000
    alpha: float = 1.0
    seed: int = 0
    losses: dict[str, str] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingHistory:
    total: list[float] = field(default_factory=list)
    per_task: dict[str, list[float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.total)

    def to_csv(self, path) -> None:
        names = list(self.per_task)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "total"] + names)
            for e, tot in enumerate(self.total):
                w.writerow([e + 1, f"{tot:.6g}"] + [f"{self.per_task[n][e]:.6g}" for n in names])


InputFn = Callable[[SampleSet], object]


def student_inputs(samples: SampleSet):
    return samples.z


def encode_label(values: np.ndarray, n_classes: Optional[int]) -> np.ndarray:
    """Regression labels as a column; class labels one-hot."""
    if n_classes:
        out = np.zeros((values.shape[0], n_classes))
        out[np.arange(values.shape[0]), values.astype(np.int64)] = 1.0
        return out
    return values.reshape(-1, 1)


def teacher_input_fn(dataset: ImbalancedDataset, source: int) -> InputFn:
    k = dataset.n_classes.get(source)

    def fn(samples: SampleSet):
        return [samples.z, encode_label(samples.labels[source], k)]
    return fn


def _task_index(net: _Net, dataset: ImbalancedDataset) -> list[int]:
    idx = []
    for h in net.config.heads:
        if h.name not in dataset.task_names:
            raise ConfigError(f"head {h.name!r} matches no task in {dataset.task_names}")
        t = dataset.task_names.index(h.name)
        if h.kind != dataset.kinds[t]:
            raise ConfigError(f"head {h.name!r} is {h.kind} but task is {dataset.kinds[t]}")
        if h.output_dim != dataset.output_dim(t):
            raise ConfigError(f"head {h.name!r} has output_dim {h.output_dim}, task needs {dataset.output_dim(t)}")
        idx.append(t)
    return idx


def train(net: _Net, dataset: ImbalancedDataset, config: TrainingConfig,
          inputs: Optional[InputFn] = None, samples: Optional[SampleSet] = None):
    """Train ``net`` in place on the samples that carry a label for any of its heads.

    Returns ``(net, history)``.  ``inputs`` maps a SampleSet to the network
    input (defaults to z); ``samples`` overrides ``dataset.train``.
    """
    tasks = _task_index(net, dataset)
    data = dataset.train if samples is None else samples
    keep = np.any(np.stack([data.masks[t] for t in tasks]), axis=0)
    data = data.take(np.flatnonzero(keep))
    n = len(data)
    if n == 0:
        raise ConfigError("no training samples carry a label for this network's tasks")
    inputs = inputs or student_inputs
    x_all = inputs(data)
    labels = [data.labels[t] for t in tasks]
    masks = [data.masks[t] for t in tasks]
    kinds = [config.losses.get(h.name, DEFAULT_LOSS[h.kind]) for h in net.config.heads]
    heads = net.head_names

    params = net.params
    state = OptimizerState.fresh(params, learning_rate=config.learning_rate, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    hist = TrainingHistory(per_task={h: [] for h in heads})
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        tot, per, nb = 0.0, [0.0] * len(heads), 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            params.zero_grad()
            g = ComputeGraph(params)
            xb = [a[idx] for a in x_all] if isinstance(x_all, list) else x_all[idx]
            # overflow here surfaces as a DivergenceError just below
            with np.errstate(over="ignore", invalid="ignore"):
                out = net.forward(g, xb)
                loss, parts = masked_multitask_loss(
                    [out[h] for h in heads], [y[idx] for y in labels], [m[idx] for m in masks],
                    kinds, config.alpha)
            val = loss.item()
            if not math.isfinite(val):
                raise DivergenceError(epoch)
            backward(g, loss)
            adam_step(params, state)
            tot += val
            per = [a + b for a, b in zip(per, parts)]
            nb += 1
        hist.total.append(tot / nb)
        for h, v in zip(heads, per):
            hist.per_task[h].append(v / nb)
    return net, hist


def predict_tasks(net: _Net, samples: SampleSet, inputs: Optional[InputFn] = None) -> dict[str, np.ndarray]:
    """Per-head predictions: regression values [n] or argmax class indices [n]."""
    raw = predict(net, (inputs or student_inputs)(samples))
    out = {}
    for h in net.config.heads:
        r = raw[h.name]
        out[h.name] = r.argmax(axis=1).astype(np.float64) if h.kind == "classification" else r[:, 0]
    return out


def evaluate(net: _Net, dataset: ImbalancedDataset, metrics: Optional[dict[str, Sequence[str]]] = None,
             inputs: Optional[InputFn] = None, eval_set: Optional[SampleSet] = None) -> MetricsReport:
    ev = dataset.eval_set if eval_set is None else eval_set
    if len(ev) == 0:
        raise ValueError("empty eval set")
    if not all(m.all() for m in ev.masks):
        raise ValueError("eval set must be fully labeled")
    tasks = _task_index(net, dataset)
    preds = predict_tasks(net, ev, inputs)
    report = MetricsReport(n_samples=len(ev))
    for h, t in zip(net.config.heads, tasks):
        kinds = (metrics or {}).get(h.name, DEFAULT_METRICS[h.kind])
        for k in kinds:
            report.values[(h.name, k)] = compute_metric(k, preds[h.name], ev.labels[t])
            if k == "mse":
                report.point_std[(h.name, k)] = squared_error_std(preds[h.name], ev.labels[t])
    return report
