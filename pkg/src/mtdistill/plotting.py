"""Figures for experiment records, written with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
COLORS = {"st": "#d95f02", "mtl": "#7570b3", "teacher": "#66a61e", "ts": "#1b9e77", "gt": "#222222"}
LABELS = {"st": "ST", "mtl": "MTL", "teacher": "teacher", "ts": "MTL T-S"}

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # keep PNG bytes reproducible
    "svg.hashsalt": "mtdistill",
}


def figsize(width=5.0, ratio=GOLDEN):
    return (width, width * ratio)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_fit(pred: dict, direction: str, path: Path) -> Path:
    """Ground truth vs per-configuration predictions of the target task on the eval grid."""
    z = pred["z"]
    if z.shape[1] != 1:
        raise ValueError("fit plot needs a one-dimensional input")
    z = z[:, 0]
    target = [t for t in pred["truth"] if t in pred["preds"].get("st", {})]
    target = target[0] if target else list(pred["truth"])[-1]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(z, pred["truth"][target], color=COLORS["gt"], lw=2.0, label="GT")
        for conf in ("st", "mtl", "ts"):
            if conf in pred["preds"] and target in pred["preds"][conf]:
                ax.plot(z, pred["preds"][conf][target], color=COLORS[conf], ls="--", label=LABELS[conf])
        ax.set_xlabel("z")
        ax.set_ylabel(target)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_metric_bars(record, path: Path, reference: dict | None = None) -> Path:
    """Mean ± std of the target metric per configuration and direction."""
    rows = [r for r in record.summary_rows() if r["configuration"] in ("st", "mtl", "ts")
            and r["task"] == record.comparisons[r["direction"]].target_task]
    metric = rows[0]["metric"] if rows else "mse"
    rows = [r for r in rows if r["metric"] == metric]
    directions = list(dict.fromkeys(r["direction"] for r in rows))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(directions), figsize=figsize(2.8 * len(directions) + 0.6, 0.8),
                                 squeeze=False)
        for ax, d in zip(axes[0], directions):
            sub = [r for r in rows if r["direction"] == d]
            x = np.arange(len(sub))
            ax.bar(x, [r["mean"] for r in sub], yerr=[r["std"] for r in sub], capsize=3,
                   color=[COLORS[r["configuration"]] for r in sub])
            if reference:
                ax.scatter(x, [reference.get(r["configuration"], (np.nan,))[0] for r in sub],
                           marker="_", s=200, color="k", zorder=3, label="reference")
                ax.legend(frameon=False)
            ax.set_xticks(x, [LABELS[r["configuration"]] for r in sub])
            ax.set_ylabel(f"{record.comparisons[d].target_task} {metric}")
            if len(directions) > 1:
                ax.set_title(d.replace("_as_input", " as teacher input"))
        fig.tight_layout()
        return _save(fig, path)


def plot_interaction(verdict: dict, path: Path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(3.6, 0.9))
        vals = [verdict["improvement_12"], verdict["improvement_21"]]
        errs = [verdict["std_12"], verdict["std_21"]]
        ax.bar([0, 1], vals, yerr=errs, capsize=3, color=[COLORS["ts"], COLORS["mtl"]])
        ax.axhline(verdict["threshold"], color="k", ls=":", lw=1)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xticks([0, 1], ["1 -> 2", "2 -> 1"])
        ax.set_ylabel("relative gain, T-S over MTL")
        title = verdict["verdict"] + (f" ({verdict['direction']})" if verdict["direction"] else "")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def figures_for(record, out_dir) -> list[Path]:
    from .harness import TABLE2_REFERENCE

    out = Path(out_dir)
    paths = []
    ref = TABLE2_REFERENCE if record.experiment == "toy-table2" else None
    if any(rep.ok_seeds for rep in record.comparisons.values()):
        paths.append(plot_metric_bars(record, out / "metrics.png", ref))
    for d, pred in record.predictions.items():
        if d.startswith("_") or pred["z"].shape[1] != 1:
            continue
        tag = "1to2" if d == "task1_as_input" else "2to1"
        paths.append(plot_fit(pred, d, out / f"fit_{tag}.png"))
    if record.verdict and record.verdict.get("kind") == "interaction":
        paths.append(plot_interaction(record.verdict, out / "interaction.png"))
    return paths
