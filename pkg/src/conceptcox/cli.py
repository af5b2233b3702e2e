"""Command-line entry point: ``conceptcox <command> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .modeling import FeatureSetVariant
from .pipeline import PipelineConfig, PipelineError, run_pipeline

COMMANDS = {
    "synth": ({"synth"}, "generate a synthetic cohort (cohort.csv, truth.json)"),
    "prep": ({"prep"}, "fit preprocessing on the train split; write prepped train/test CSVs"),
    "concepts": ({"concepts"}, "fit PU concept models; write recall/new-positive table"),
    "fit": ({"fit"}, "fit Lasso-Cox per variant; write models and hazard-ratio tables"),
    "eval": ({"eval"}, "evaluate on the test split; write report, KM/calibration tables and SVGs"),
    "backtest": ({"backtest"}, "seasonal back-test matrix per configured variant"),
    "export-sankey": ({"sankey"}, "Sankey JSON and SVG per variant"),
    "run": (None, "full pipeline"),
}


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _global_flags(parser: argparse.ArgumentParser, top: bool) -> None:
    # flags are accepted before or after the command; only the top level sets defaults
    def default(value):
        return value if top else argparse.SUPPRESS

    parser.add_argument("--config", default=default(None), help="JSON config file (default: built-in synthetic cohort)")
    parser.add_argument("--seed", type=_seed, default=default(None), help="overrides the config seed")
    parser.add_argument("--out", default=default("out"), help="artifact directory (default: ./out)")
    parser.add_argument(
        "--variant",
        action="append",
        default=default(None),
        choices=[v.value for v in FeatureSetVariant],
        help="feature-set variant(s) to use instead of the config's; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptcox", description=__doc__)
    _global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        _global_flags(sub.add_parser(name, help=help_text), top=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        parser.exit(2, f"conceptcox: bad config: {exc}\n")
    products, _ = COMMANDS[args.command]
    if args.variant:
        variants = tuple(FeatureSetVariant(v) for v in dict.fromkeys(args.variant))
        if args.command == "backtest":
            config = replace(config, backtest=replace(config.backtest, variants=variants))
        else:
            config = replace(config, variants=variants)
    try:
        out = run_pipeline(config, args.out, seed=args.seed, products=products)
    except PipelineError as exc:
        print(f"conceptcox: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
