"""Command-line driver.

    g2sd <verb> [--config FILE] [--set key=value ...] [--out DIR]
                [--seed N] [--workers N]

Verbs map onto the stage runners; every run writes its fully resolved
configuration into the output directory before any work starts, so artifacts
are reproducible from that echo alone. The default output root comes from
$G2SD_OUT (falling back to ./runs).
"""

import argparse
import os
import sys

from g2sd import config as cfgmod
from g2sd import pipeline
from g2sd.config import ConfigError, RunConfig
from g2sd.estimators import TrainingDiverged

VERBS = {
    "pretrain": pipeline.run_pretrain,
    "distill-generic": pipeline.run_generic,
    "distill-specific": pipeline.run_specific,
    "train-baseline": pipeline.run_baseline,
    "eval": pipeline.run_eval,
    "analyze": pipeline.run_analyze,
    "ablate": pipeline.run_ablate,
    "pipeline": pipeline.run_pipeline,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="g2sd",
        description="Two-stage (generic-to-specific) distillation of masked "
                    "autoencoders, desk scale.",
    )
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")
    for verb in VERBS:
        p = sub.add_parser(verb, help=f"run the {verb} stage")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a resolved config key (repeatable)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--workers", type=int, default=None,
                       help="worker bound (results are worker-count independent)")
    return parser


def _out_dir(args):
    if args.out:
        return args.out
    root = os.environ.get("G2SD_OUT", "runs")
    return os.path.join(root, args.verb)


def _print_result(verb, result):
    if verb == "pipeline":
        print(f"teacher accuracy: {result['teacher_accuracy']:.4f}")
        header = f"{'arm':<14} {'acc':>7} {'occl-drop':>10} {'cka':>7}"
        print(header)
        for row in result["summary"]:
            print(f"{row['arm']:<14} {row['accuracy']:>7.4f} "
                  f"{row['occlusion_drop']:>10.4f} {row['cka_to_teacher']:>7.4f}")
    else:
        for key, value in result.items():
            print(f"{key}: {value}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_text = None
        if args.config:
            with open(args.config) as fh:
                file_text = fh.read()
        resolved = cfgmod.resolve(file_text, overrides=args.set, seed=args.seed,
                                  stage=args.verb)
        if args.workers is not None:
            resolved["run.workers"] = str(args.workers)
        cfgmod.validate_stage(resolved, args.verb)
    except (ConfigError, OSError) as exc:
        parser.exit(2, f"g2sd: {exc}\n")
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w") as fh:
        fh.write(cfgmod.format_config(resolved))
    try:
        result = VERBS[args.verb](RunConfig(resolved), out_dir)
    except (ConfigError, TrainingDiverged, RuntimeError, ValueError, OSError) as exc:
        print(f"g2sd: {args.verb} failed: {exc}", file=sys.stderr)
        return 1
    _print_result(args.verb, result)
    return 0


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
