"""Config-driven experiment runner: per-seed jobs, long-format metrics.csv,
a JSON report, a plain-text summary and figures."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from .distill import (
    DIRECTIONS,
    EXPECTED_VERDICT,
    ComparisonReport,
    DistillConfig,
    primary_metric,
    run_seed,
    verdict_from_reports,
)
from .metrics import improvement_ratio
from .model import ConfigError
from .tasks import (
    build_condition_scenario,
    build_synth_segmentation,
    export_dataset,
    sample_scenario_dataset,
    sample_toy_dataset,
)
from .training import DivergenceError, TrainingConfig, predict_tasks, teacher_input_fn

log = logging.getLogger(__name__)

METRICS_HEADER = ["experiment", "seed", "configuration", "task", "metric", "value"]

# published toy-example values (mean, std of MSE on f2)
TABLE2_REFERENCE = {"st": (0.0149, 0.0111), "mtl": (0.0101, 0.0068), "ts": (0.0072, 0.0062)}
TABLE2_LABELS = {"st": "ST", "mtl": "MTL", "ts": "MTL-TS"}
TABLE2_MIN_SEEDS = 10
TABLE2_MIN_IMPROVEMENT = 0.15

# table-row analogs: UMST -> st, UMMT -> mtl, MMMT -> teacher, UMMT-PS -> ts
ROW_NAMES = {"st": "UMST", "mtl": "UMMT", "teacher": "MMMT", "ts": "UMMT-P"}

TOY_CONFIGS = {"toy-st": ("st",), "toy-mtl": ("mtl",), "toy-ts": ("ts",),
               "toy-table2": ("st", "mtl", "ts")}


class AllSeedsFailed(RuntimeError):
    pass


@dataclass
class RunRecord:
    experiment: str
    fingerprint: str
    config: dict
    seeds: list[int]
    rows: list[tuple] = field(default_factory=list)
    comparisons: dict[str, ComparisonReport] = field(default_factory=dict)
    verdict: Optional[dict] = None
    failures: dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0
    artifacts: list[str] = field(default_factory=list)
    predictions: dict = field(default_factory=dict, repr=False)

    def summary_rows(self) -> list[dict]:
        out = []
        for direction, rep in self.comparisons.items():
            keys = []
            for s in rep.ok_seeds:
                for conf, r in rep.per_seed[s].items():
                    for task, metric, _ in r.rows():
                        if (conf, task, metric) not in keys:
                            keys.append((conf, task, metric))
            for conf, task, metric in keys:
                v = rep.values(conf, task, metric)
                pts = [rep.per_seed[s][conf].point_std.get((task, metric)) for s in rep.ok_seeds
                       if conf in rep.per_seed[s]]
                pts = [p for p in pts if p is not None]
                out.append({"direction": direction, "configuration": conf, "task": task,
                            "metric": metric, "mean": float(v.mean()), "std": float(v.std()),
                            "point_std": float(np.mean(pts)) if pts else None,
                            "n": int(v.size),
                            "non_comparable": conf == "teacher" and task == rep.source_task})
        return out

    def to_dict(self) -> dict:
        return {
            "format": "mtdistill-report/1",
            "experiment": self.experiment,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "seeds": self.seeds,
            "failures": self.failures,
            "summary": self.summary_rows(),
            "pseudo_counts": {d: {str(s): c for s, c in rep.pseudo_counts.items()}
                              for d, rep in self.comparisons.items()},
            "verdict": self.verdict,
            "row_names": ROW_NAMES,
        }


# --------------------------------------------------------------------------
# building blocks from a config dict

DEFAULT_TRAINING = {"learning_rate": 1e-4, "batch_size": 32, "epochs": 300, "alpha": 1.0}


def distill_config(cfg: dict) -> DistillConfig:
    d = copy.deepcopy(cfg.get("distill", {}))
    teacher = {**DEFAULT_TRAINING, "epochs": 1500, **d.pop("teacher", {})}
    student = {**DEFAULT_TRAINING, **d.pop("student", {})}
    return DistillConfig(teacher=TrainingConfig(**teacher), student=TrainingConfig(**student), **d)


def dataset_factory(cfg: dict):
    """Return ``make(seed, abundant) -> ImbalancedDataset`` for the experiment."""
    exp = cfg["experiment"]
    ds = cfg.get("dataset", {})
    if exp.startswith("toy"):
        n_A, n_B = ds.get("n_A", 640), ds.get("n_B", 160)

        def make(seed, abundant=0):
            if abundant != 0:
                raise ConfigError("toy experiments only support f1 as the abundant task")
            return sample_toy_dataset(n_A, n_B, seed)
        return make
    use_scenario = exp in cfgmod.CONDITION_OF or (exp == "interaction" and ds.get("source") == "scenario")
    if use_scenario:
        sc_cfg = cfg.get("scenario", {})
        cond = cfgmod.CONDITION_OF.get(exp, sc_cfg.get("condition", "Cond1"))
        scenario = build_condition_scenario(cond, sc_cfg.get("basis_size", 12),
                                            sc_cfg.get("cardinalities", [8, 2, 2]), sc_cfg.get("seed", 0))
        n_A, n_B = ds.get("n_A", 640), ds.get("n_B", 160)
        return lambda seed, abundant=0: sample_scenario_dataset(scenario, n_A, n_B, seed, abundant)
    n_A, n_B, k = ds.get("n_A", 500), ds.get("n_B", 250), ds.get("n_classes", 4)
    return lambda seed, abundant=0: build_synth_segmentation(k, n_A, n_B, seed, abundant=abundant)


def _jobs(cfg: dict) -> list[tuple[int, str]]:
    exp = cfg["experiment"]
    seeds = cfg["seeds"]
    if exp in TOY_CONFIGS:
        return [(s, "task1_as_input") for s in seeds]
    return [(s, d) for d in DIRECTIONS for s in seeds]


def _configurations(cfg: dict) -> tuple[str, ...]:
    return TOY_CONFIGS.get(cfg["experiment"], ("st", "mtl", "ts"))


def run_job(cfg: dict, seed: int, direction: str, first: bool) -> dict:
    """One (seed, direction) unit; picklable for worker processes."""
    dcfg = replace(distill_config(cfg), direction=direction)
    ds = dataset_factory(cfg)(seed, DIRECTIONS.index(direction))
    out = {"seed": seed, "direction": direction}
    try:
        res = run_seed(ds, dcfg, seed, _configurations(cfg), keep_nets=first)
    except DivergenceError as e:
        out["failure"] = str(e)
        return out
    out["reports"] = res["reports"]
    if "pseudo" in res:
        out["pseudo"] = res["pseudo"]
        if cfg.get("dump_pseudo"):
            out["pseudo_set"] = res["pseudo_set"]
    if first:
        preds = {}
        for name, net in res["nets"].items():
            inputs = teacher_input_fn(ds, dcfg.source) if name == "teacher" else None
            preds[name] = predict_tasks(net, ds.eval_set, inputs)
        out["predictions"] = {"z": ds.eval_set.z, "truth": dict(zip(ds.task_names, ds.eval_set.labels)),
                              "preds": preds}
    if cfg.get("dump_datasets"):
        out["dataset"] = ds
    return out


# --------------------------------------------------------------------------
# verdicts


def table2_verdict(rep: ComparisonReport, metric: str = "mse", min_seeds: int = TABLE2_MIN_SEEDS,
                   min_improvement: float = TABLE2_MIN_IMPROVEMENT) -> dict:
    """Ordering MTL-TS < MTL < ST on mean target error plus a relative margin."""
    means = {c: rep.summary(c, rep.target_task, metric)[0] for c in ("st", "mtl", "ts")}
    imp = improvement_ratio(means["mtl"], means["ts"])
    ordered = means["ts"] < means["mtl"] < means["st"]
    n = len(rep.ok_seeds)
    if n < min_seeds:
        status = "insufficient seeds for verdict"
    else:
        status = "pass" if ordered and imp >= min_improvement else "fail"
    return {"kind": "table2", "status": status, "ordering_holds": bool(ordered),
            "improvement_ts_over_mtl": imp, "min_improvement": min_improvement,
            "n_seeds": n, "min_seeds": min_seeds, "means": means,
            "reference": {TABLE2_LABELS[k]: {"mean": m, "std": s} for k, (m, s) in TABLE2_REFERENCE.items()},
            "reference_improvement": improvement_ratio(TABLE2_REFERENCE["mtl"][0], TABLE2_REFERENCE["ts"][0])}


def interaction_verdict(cfg: dict, comparisons: dict[str, ComparisonReport]) -> dict:
    make = dataset_factory(cfg)
    dcfg = distill_config(cfg)
    metrics = {}
    for src, d in enumerate(DIRECTIONS):
        probe = make(cfg["seeds"][0], src)
        metrics[d] = primary_metric(probe, replace(dcfg, direction=d), 1 - src)
    threshold = cfg.get("interaction", {}).get("threshold", 0.05)
    v = verdict_from_reports(comparisons, metrics, threshold).to_dict()
    v["kind"] = "interaction"
    v["metrics"] = metrics
    exp = cfg["experiment"]
    cond = cfgmod.CONDITION_OF.get(exp)
    if cond is None and exp == "interaction" and cfg.get("dataset", {}).get("source") == "scenario":
        cond = cfg.get("scenario", {}).get("condition")
    if cond is not None:
        exp_verdict, exp_dir = EXPECTED_VERDICT[cond]
        v["constructed_condition"] = cond
        v["expected"] = {"verdict": exp_verdict, "direction": exp_dir}
        v["status"] = "pass" if (v["verdict"], v["direction"]) == (exp_verdict, exp_dir) else "fail"
    elif cfg.get("dataset", {}).get("source", "synthseg") == "synthseg" and not exp.startswith("toy"):
        # depth helps segmentation but not conversely
        v["expected"] = {"verdict": "Cond2", "direction": "1->2"}
        v["status"] = "pass" if (v["verdict"], v["direction"]) == ("Cond2", "1->2") else "fail"
    return v


# --------------------------------------------------------------------------
# running


def execute(cfg: dict) -> RunRecord:
    """Run every job of a validated config and assemble the record (no files)."""
    t0 = time.perf_counter()
    exp = cfg["experiment"]
    jobs = _jobs(cfg)
    workers = cfg.get("workers", 1)
    firsts = [i == 0 or jobs[i][1] != jobs[i - 1][1] for i in range(len(jobs))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(run_job, cfg, s, d, f) for (s, d), f in zip(jobs, firsts)]
            results = [f.result() for f in futs]
    else:
        results = [run_job(cfg, s, d, f) for (s, d), f in zip(jobs, firsts)]

    record = RunRecord(exp, cfgmod.fingerprint(_fingerprinted(cfg)), cfg, list(cfg["seeds"]))
    probe = {d: dataset_factory(cfg)(cfg["seeds"][0], DIRECTIONS.index(d)) for d in {j[1] for j in jobs}}
    for res in sorted(results, key=lambda r: (DIRECTIONS.index(r["direction"]), r["seed"])):
        d = res["direction"]
        if d not in record.comparisons:
            ds = probe[d]
            src = DIRECTIONS.index(d)
            record.comparisons[d] = ComparisonReport(d, ds.task_names[1 - src], ds.task_names[src],
                                                     list(cfg["seeds"]))
        rep = record.comparisons[d]
        if "failure" in res:
            rep.failures[res["seed"]] = res["failure"]
            record.failures[f"{res['seed']}:{d}"] = res["failure"]
            continue
        rep.add(res["seed"], res)
        if "predictions" in res:
            record.predictions[d] = res["predictions"]
        if "pseudo_set" in res:
            record.predictions.setdefault("_pseudo", []).append((res["seed"], d, res["pseudo_set"]))
        if "dataset" in res:
            record.predictions.setdefault("_datasets", []).append((res["seed"], d, res["dataset"]))
    record.rows = _metric_rows(record)
    if all(not rep.ok_seeds for rep in record.comparisons.values()):
        record.wall_clock = time.perf_counter() - t0
        return record
    if exp == "toy-table2":
        t2 = cfg.get("table2", {})
        record.verdict = table2_verdict(record.comparisons["task1_as_input"], "mse",
                                        t2.get("min_seeds", TABLE2_MIN_SEEDS),
                                        t2.get("min_improvement", TABLE2_MIN_IMPROVEMENT))
    elif exp not in TOY_CONFIGS:
        record.verdict = interaction_verdict(cfg, record.comparisons)
    record.wall_clock = time.perf_counter() - t0
    return record


def _fingerprinted(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in ("output_dir", "workers", "figures")}


def _direction_tag(direction: str) -> str:
    return "1->2" if direction == "task1_as_input" else "2->1"


def _metric_rows(record: RunRecord) -> list[tuple]:
    two_way = len(record.comparisons) > 1 or record.experiment not in TOY_CONFIGS
    rows = []
    for seed in record.seeds:
        for d, rep in record.comparisons.items():
            suffix = f"@{_direction_tag(d)}" if two_way else ""
            if seed in rep.failures:
                rows.append((record.experiment, seed, "failure" + suffix, "", "diverged", float("nan")))
                continue
            if seed not in rep.per_seed:
                continue
            for conf, r in rep.per_seed[seed].items():
                for task, metric, value in r.rows():
                    rows.append((record.experiment, seed, conf + suffix, task, metric, value))
    return rows


def format_value(v: float) -> str:
    return f"{v:.6g}"


def emit_report(records: Sequence[RunRecord], out_dir, fmt: str = "csv") -> list[Path]:
    """Write metrics.csv (``fmt="csv"``) or report.json (``fmt="structured-text"``)."""
    if not records:
        raise ValueError("no records to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / "metrics.csv"
        indexed = [(i, row) for i, rec in enumerate(records) for row in rec.rows]
        indexed.sort(key=lambda t: (t[0], t[1][1]))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for _, (exp, seed, conf, task, metric, value) in indexed:
                w.writerow([exp, seed, conf, task, metric, format_value(value)])
        return [path]
    if fmt == "structured-text":
        path = out / "report.json"
        doc = records[0].to_dict() if len(records) == 1 else {"records": [r.to_dict() for r in records]}
        path.write_text(json.dumps(doc, indent=2, sort_keys=False, default=_json_default) + "\n")
        return [path]
    raise ValueError(f"unknown report format {fmt!r}")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def summary_text(record: RunRecord) -> str:
    lines = [f"experiment: {record.experiment}", f"fingerprint: {record.fingerprint}",
             f"seeds: {len(record.seeds)} ({len(record.failures)} failed jobs)", ""]
    v = record.verdict or {}
    if v.get("kind") == "table2":
        rep = record.comparisons["task1_as_input"]
        lines.append(f"mean eval MSE on {rep.target_task} over {v['n_seeds']} seeds")
        lines.append(f"{'configuration':<14}{'mean':>12}{'seed std':>12}{'point std':>12}{'reference':>24}")
        pstd = {r["configuration"]: r["point_std"] for r in record.summary_rows()
                if r["task"] == rep.target_task and r["metric"] == "mse"}
        for c in ("st", "mtl", "ts"):
            m, s = rep.summary(c, rep.target_task, "mse")
            rm, rs = TABLE2_REFERENCE[c]
            lines.append(f"{TABLE2_LABELS[c]:<14}{format_value(m):>12}{format_value(s):>12}"
                         f"{format_value(pstd[c]):>12}{f'{rm} ± {rs}':>24}")
        lines.append("")
        lines.append(f"improvement MTL-TS over MTL: {format_value(v['improvement_ts_over_mtl'])} "
                     f"(reference {format_value(v['reference_improvement'])}, required >= {v['min_improvement']})")
        lines.append(f"ordering MTL-TS < MTL < ST: {'yes' if v['ordering_holds'] else 'no'}")
        lines.append(f"verdict: {v['status']}")
        return "\n".join(lines) + "\n"
    for row in record.summary_rows():
        tag = f"[{_direction_tag(row['direction'])}] " if len(record.comparisons) > 1 else ""
        note = "  (auto-encoded input, not comparable)" if row["non_comparable"] else ""
        lines.append(f"{tag}{ROW_NAMES.get(row['configuration'], row['configuration']):<8}"
                     f"{row['task']:<8}{row['metric']:<8}{format_value(row['mean']):>12} ± "
                     f"{format_value(row['std'])}{note}")
    if v.get("kind") == "interaction":
        lines += ["", f"improvement 1->2: {format_value(v['improvement_12'])} ± {format_value(v['std_12'])}",
                  f"improvement 2->1: {format_value(v['improvement_21'])} ± {format_value(v['std_21'])}",
                  f"threshold: {v['threshold']}",
                  f"verdict: {v['verdict']}" + (f" ({v['direction']})" if v["direction"] else "")]
        if "status" in v:
            lines.append(f"expected: {v['expected']['verdict']}"
                         + (f" ({v['expected']['direction']})" if v["expected"]["direction"] else "")
                         + f" -> {v['status']}")
    return "\n".join(lines) + "\n"


def write_outputs(record: RunRecord, out_dir, figures: bool = True) -> list[Path]:
    out = Path(out_dir)
    paths = emit_report([record], out, "csv") + emit_report([record], out, "structured-text")
    summ = out / "summary.txt"
    summ.write_text(summary_text(record))
    paths.append(summ)
    for seed, d, ps in record.predictions.get("_pseudo", []):
        p = out / "pseudo" / f"seed{seed}_{_direction_tag(d).replace('->', 'to')}.csv"
        p.parent.mkdir(parents=True, exist_ok=True)
        ps.to_csv(p)
        paths.append(p)
    for seed, d, ds in record.predictions.get("_datasets", []):
        paths += export_dataset(ds, out / "datasets", f"seed{seed}_{_direction_tag(d).replace('->', 'to')}")
    if figures:
        from . import plotting
        paths += plotting.figures_for(record, out / "figures")
    record.artifacts = [str(p) for p in paths]
    return paths


def run_experiment(config_source, overrides: Sequence[str] = (), seeds: Optional[Sequence[int]] = None,
                   out=None, figures: Optional[bool] = None) -> RunRecord:
    """Resolve and validate a config, run it, and write its output tree."""
    cfg = cfg_in = cfgmod.resolve(config_source, overrides, seeds, out) if not isinstance(config_source, dict) \
        else _resolve_dict(config_source, overrides, seeds, out)
    record = execute(cfg)
    out_dir = cfg_in.get("output_dir", f"runs/{cfg['experiment']}")
    write_outputs(record, out_dir, cfg.get("figures", True) if figures is None else figures)
    if all(not rep.ok_seeds for rep in record.comparisons.values()):
        raise AllSeedsFailed(f"every seed diverged: {record.failures}")
    return record


def _resolve_dict(cfg: dict, overrides, seeds, out) -> dict:
    cfg = copy.deepcopy(cfg)
    for o in overrides:
        cfgmod.apply_override(cfg, o)
    if seeds:
        cfg["seeds"] = list(seeds)
    if out is not None:
        cfg["output_dir"] = str(out)
    cfgmod.validate(cfg)
    return cfg


def reproduce_table2(seeds: Sequence[int] = tuple(range(10)), out=None, overrides: Sequence[str] = (),
                     figures: bool = True) -> RunRecord:
    return run_experiment("toy-table2", overrides, list(seeds), out, figures)
