"""Command line entry point: ``geoadv <subcommand> CONFIG [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .config import ExperimentConfig

log = logging.getLogger("geoadv")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoadv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("config", type=Path, help="experiment TOML file")
        p.add_argument("--root", type=Path, default=None, help="override the outputs directory")
        return p

    add("gen-data", "generate the synthetic dataset")
    add("train-ae", "train the victim autoencoder")
    add("train-classifier", "train the semantic classifier")
    p = add("attack", "run a targeted attack sweep")
    p.add_argument("--mode", choices=pipeline.MODES, default="output")
    p.add_argument("--untargeted", action="store_true", help="also write the per-source best over target classes")
    p.add_argument("--lambda-sweep", type=_floats, default=None, metavar="L1,L2,...")
    p = add("defend", "evaluate both defenses on stored attacks")
    p.add_argument("--detect", action="store_true", help="also train decoder-side attack detectors")
    add("transfer-eval", "score stored attacks on a differently initialized autoencoder")
    p = add("calibrate-defense", "grid over surface-defense k and delta")
    p.add_argument("--mode", choices=pipeline.MODES, default="output")
    p = add("interpolate", "export clouds along the source-to-adversarial path")
    p.add_argument("--mode", choices=pipeline.MODES, default="output")
    p.add_argument("--pair", type=int, default=0)
    p.add_argument("--alphas", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p = add("ablate", "rerun the output attack with one setting changed at a time")
    p.add_argument("--sources-per-class", type=int, default=1)
    p.add_argument("--variants", type=lambda t: [v for v in t.split(",") if v], default=None,
                   metavar="V1,V2,...", help="subset of " + ",".join([*pipeline.PAIRED_ABLATIONS, *pipeline.SELECTION_ABLATIONS]))
    add("report", "render CSV tables and the markdown report")
    return parser


def run_command(args: argparse.Namespace) -> object:
    cfg = ExperimentConfig.load(args.config)
    run = pipeline.Run.open(cfg, args.root)
    cmd = args.command
    if cmd == "gen-data":
        return pipeline.gen_data(run)
    if cmd == "train-ae":
        return pipeline.train_ae_stage(run)
    if cmd == "train-classifier":
        return pipeline.train_classifier_stage(run)
    if cmd == "attack":
        return pipeline.attack_stage(run, args.mode, args.untargeted, args.lambda_sweep)
    if cmd == "defend":
        return pipeline.defend_stage(run, args.detect)
    if cmd == "transfer-eval":
        return pipeline.transfer_stage(run)
    if cmd == "calibrate-defense":
        return pipeline.calibrate_stage(run, args.mode)
    if cmd == "interpolate":
        return pipeline.interpolate_stage(run, args.mode, args.pair, args.alphas)
    if cmd == "ablate":
        return pipeline.ablation_stage(run, "output", args.sources_per_class, args.variants)
    return pipeline.report_stage(run)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run_command(args)
    except Exception as exc:  # every failure becomes a diagnostic and a nonzero exit code
        print(f"geoadv {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    for item in out if isinstance(out, list) else [out]:
        print(item)
    return 0


if __name__ == "__main__":
    sys.exit(main())
