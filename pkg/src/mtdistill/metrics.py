"""Evaluation metrics: mse, rmse, logrmse, miou, and relative improvement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METRIC_KINDS = ("mse", "rmse", "logrmse", "miou")
HIGHER_IS_BETTER = {"mse": False, "rmse": False, "logrmse": False, "miou": True}
LOG_CLAMP = 1e-6


class MetricError(ValueError):
    pass


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.size == 0 or p.size != g.size:
        raise MetricError(f"need equal non-empty lengths, got {p.size} and {g.size}")
    return p, g


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    d = p - g
    return float(np.mean(d * d))


def squared_error_std(pred, gt) -> float:
    """Dispersion of the squared error across evaluation points."""
    p, g = _pair(pred, gt)
    d = p - g
    return float(np.std(d * d))


def rmse(pred, gt) -> float:
    return float(np.sqrt(mse(pred, gt)))


def logrmse(pred, gt) -> float:
    """Natural-log rmse with both sides clamped at 1e-6."""
    p, g = _pair(pred, gt)
    d = np.log(np.maximum(p, LOG_CLAMP)) - np.log(np.maximum(g, LOG_CLAMP))
    return float(np.sqrt(np.mean(d * d)))


def miou(pred, gt) -> float:
    """Mean IoU over classes present in the prediction or the ground truth."""
    p, g = _pair(pred, gt)
    p = p.astype(np.int64)
    g = g.astype(np.int64)
    classes = np.union1d(p, g)
    ious = [np.sum((p == c) & (g == c)) / np.sum((p == c) | (g == c)) for c in classes]
    return float(np.mean(ious))


_FUNCS = {"mse": mse, "rmse": rmse, "logrmse": logrmse, "miou": miou}


def compute_metric(kind: str, predictions, ground_truth) -> float:
    try:
        fn = _FUNCS[kind]
    except KeyError:
        raise MetricError(f"unknown metric {kind!r}") from None
    return fn(predictions, ground_truth)


def improvement_ratio(baseline: float, candidate: float, higher_is_better: bool = False) -> float:
    """Relative improvement of ``candidate`` over ``baseline``; positive is better."""
    if baseline == 0:
        raise MetricError("baseline is zero")
    if higher_is_better:
        return (candidate - baseline) / baseline
    return (baseline - candidate) / baseline


@dataclass
class MetricsReport:
    values: dict[tuple[str, str], float] = field(default_factory=dict)
    n_samples: int = 0
    # per-point std of the squared error, for mse entries only
    point_std: dict[tuple[str, str], float] = field(default_factory=dict)

    def __getitem__(self, key: tuple[str, str]) -> float:
        return self.values[key]

    def get(self, task: str, metric: str) -> float:
        return self.values[(task, metric)]

    def rows(self):
        for (task, metric), v in self.values.items():
            yield task, metric, v
