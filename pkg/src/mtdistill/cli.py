"""Command line entry point: ``mtdistill run|reproduce-table2|analyze-interaction|export-dataset``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod
from .harness import AllSeedsFailed, dataset_factory, run_experiment, summary_text
from .tasks import export_dataset

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _seeds(values) -> list[int] | None:
    if not values:
        return None
    out = []
    for v in values:
        for part in str(v).split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    return out


def _common(p: argparse.ArgumentParser, default_config: str | None = None) -> None:
    p.add_argument("--config", default=default_config, required=default_config is None,
                   help="YAML config path or bundled config name (%s)" % ", ".join(cfgmod.builtin_names()))
    p.add_argument("--seed", action="append", metavar="SEEDS",
                   help="seed list, e.g. 0,1,2 or 0..9; repeatable; replaces the config's seeds")
    p.add_argument("--out", help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as YAML; repeatable")
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdistill", description="Multi-task teacher-student experiments: run configs, write reports and figures.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run any configured experiment")
    _common(p)

    p = sub.add_parser("reproduce-table2", help="toy ST / MTL / MTL-TS comparison with verdict")
    _common(p, "toy-table2")

    p = sub.add_parser("analyze-interaction", help="teacher-student in both directions, condition verdict")
    _common(p, "interaction")

    p = sub.add_parser("export-dataset", help="write a config's dataset(s) as CSV")
    _common(p, "toy-table2")
    p.add_argument("--abundant", type=int, choices=(1, 2), default=1,
                   help="which task carries the abundant labels")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.resolve(args.config, args.override, _seeds(args.seed), args.out)
    except cfgmod.ConfigValidationError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except ValueError as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_INVALID

    if args.command == "export-dataset":
        make = dataset_factory(cfg)
        out = args.out or cfg.get("output_dir", "datasets")
        try:
            for s in cfg["seeds"]:
                for p in export_dataset(make(s, args.abundant - 1), out, f"{cfg['experiment']}_seed{s}"):
                    print(p)
        except ValueError as e:
            print(f"invalid config: {e}", file=sys.stderr)
            return EXIT_INVALID
        return EXIT_OK

    try:
        record = run_experiment(cfg, figures=False if args.no_figures else None)
    except AllSeedsFailed as e:
        print(e, file=sys.stderr)
        return EXIT_DIVERGED
    except (cfgmod.ConfigValidationError, ValueError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_INVALID
    print(summary_text(record), end="")
    print(f"wall clock: {record.wall_clock:.1f}s")
    for p in record.artifacts:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
