"""Command-line entry point.

Exit codes: 0 success, 1 invalid config or arguments, 2 a stage failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AggregationError, ConfigurationError, UsageError
from .harness import STAGES, ExperimentConfig, Pipeline, StageFailure, export_latents, report

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment YAML file")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--out", help="output directory (default: the config's output)")


def build_parser():
    parser = _Parser(prog="bisimvib", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run only the {stage} stage"))
    _common(sub.add_parser("run", help="run the full pipeline"))
    lat = sub.add_parser("export-latents", help="PCA projection of latents to CSV")
    _common(lat)
    lat.add_argument("--size", type=int, help="dataset size of the VIB model (default: largest)")
    rep = sub.add_parser("report", help="aggregate run directories")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", required=True, help="aggregate CSV path")
    return parser


def _pipeline(args):
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return Pipeline(config, args.out)


def _summary(rep):
    for stage, info in rep.stages.items():
        print(f"{stage:<10} {info['status']}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            report(args.run_dirs, args.out)
            print(Path(args.out).with_suffix(".txt").read_text(), end="")
            return EXIT_OK
        pipe = _pipeline(args)
        if args.command == "export-latents":
            if pipe.config.vib is None:
                raise ConfigurationError("export-latents needs a vib block")
            size = args.size or pipe.plan_size
            out = pipe.out / f"latents_{size}.csv"
            n_pts, n_cent = export_latents(pipe.vib_model(size), pipe.dataset(size), out, pipe.env().labels)
            print(f"wrote {out} ({n_pts} points, {n_cent} centroids)")
            return EXIT_OK
        if args.command == "run":
            rep = pipe.run()
        else:
            pipe.run_stage(args.command)
            pipe.write_report()
            rep = pipe.report
        _summary(rep)
        return EXIT_OK
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.report.stages.get(exc.stage, {}), indent=1), file=sys.stderr)
        return EXIT_STAGE
    except (ConfigurationError, UsageError, AggregationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
