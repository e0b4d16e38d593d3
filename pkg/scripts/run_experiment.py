"""Run every stage of an experiment config, resuming from existing artifacts.

Usage: python3 scripts/run_experiment.py configs/desk.toml [--root DIR]
"""

import argparse
import logging
import time
from pathlib import Path

from geoadv.config import ExperimentConfig
from geoadv.pipeline import Run, run_all


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("config", type=Path)
    parser.add_argument("--root", type=Path, default=None)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    start = time.time()
    run = Run.open(ExperimentConfig.load(args.config), args.root)
    report = run_all(run)
    print(f"{report} ({time.time() - start:.0f} s)")


if __name__ == "__main__":
    main()
