"""Command-line driver.

Verbs: train, eval, sweep, recipe, export-features, plot. Relative output
directories land under $SSKD_OUTPUT_ROOT (default ./runs).
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import export_features, load_checkpoint
from .config import load_config
from .data import load_binary
from .errors import ConfigError, ParseError, RunAbort, UsageError, ValidationError
from .plotting import write_sweep_svg
from .recipes import DEFAULT_SEEDS, DEFAULT_STAGE_COUNTS, RECIPES, recipe
from .runner import eval_checkpoint, run
from .sweep import read_sweep_csv, sweep_loss_weight


def _add_train(sub):
    p = sub.add_parser("train", help="execute one run from a config file")
    p.add_argument("config", help="path to a run config")
    p.add_argument("--output-root", default=None, help="root for relative output dirs")


def _add_eval(sub):
    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint on a dataset file")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="binary dataset file")


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="loss-weight sweep with an sskd reference")
    p.add_argument("config", help="kd_joint base config")
    p.add_argument("--loss-weights", default="1,5,10,15,25",
                   help="comma-separated weights")
    p.add_argument("--output-root", default=None)


def _add_recipe(sub):
    p = sub.add_parser("recipe", help="run a paired-comparison experiment")
    p.add_argument("name", choices=RECIPES)
    p.add_argument("--config", default=None, help="base config overriding desk defaults")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))
    p.add_argument("--stage-counts", default=",".join(map(str, DEFAULT_STAGE_COUNTS)))
    p.add_argument("--output-root", default=None)


def _add_export(sub):
    p = sub.add_parser("export-features", help="dump flattened stage features to file")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--out", required=True)


def _add_plot(sub):
    p = sub.add_parser("plot", help="re-render a sweep CSV as SVG")
    p.add_argument("csv")
    p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="sskd", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for add in (_add_train, _add_eval, _add_sweep, _add_recipe, _add_export, _add_plot):
        add(sub)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "train":
            report = run(load_config(args.config), output_root=args.output_root)
            print(json.dumps(report["eval"], indent=2))
        elif args.verb == "eval":
            top1, top5 = eval_checkpoint(args.checkpoint, load_binary(args.dataset, split="test"))
            print(json.dumps({"top1": top1, "top5": top5}, indent=2))
        elif args.verb == "sweep":
            weights = [float(w) for w in args.loss_weights.split(",") if w.strip()]
            summary = sweep_loss_weight(load_config(args.config), weights,
                                        output_root=args.output_root)
            print(json.dumps(summary, indent=2))
        elif args.verb == "recipe":
            base = load_config(args.config) if args.config else None
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            counts = [int(s) for s in args.stage_counts.split(",") if s.strip()]
            report = recipe(args.name, base=base, output_dir=args.output_dir,
                            seeds=seeds, stage_counts=counts, output_root=args.output_root)
            print(json.dumps(report, indent=2, sort_keys=True))
        elif args.verb == "export-features":
            model = load_checkpoint(args.checkpoint)
            dataset = load_binary(args.dataset, split="test")
            export_features(model, dataset, args.stage, args.out)
            print(f"wrote {args.out}")
        elif args.verb == "plot":
            points, reference = read_sweep_csv(args.csv)
            write_sweep_svg(points, reference, args.out)
            print(f"wrote {args.out}")
    except (ConfigError, ParseError, UsageError, ValidationError, RunAbort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
