#!/usr/bin/env python3
"""End-to-end toy-world experiment: generate data, run all four training
stages, evaluate, and sweep the candidate-path count.

Usage: python scripts/run_toy_experiment.py [--out runs/toy] [--seed 7]
"""

import argparse
import sys
from pathlib import Path

from convrec.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent


def run(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/toy")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--entities", type=int, default=200)
    parser.add_argument("--relations", type=int, default=5)
    parser.add_argument("--dialogs", type=int, default=500)
    parser.add_argument("--config", default=str(ROOT / "configs" / "toy.cfg"))
    args = parser.parse_args(argv)

    out = Path(args.out)
    io = ["--kg", str(out / "kg.tsv"), "--corpus", str(out / "corpus.jsonl")]
    steps = [
        ["toygen", "--seed", str(args.seed), "--entities", str(args.entities),
         "--relations", str(args.relations), "--dialogs", str(args.dialogs),
         "--out", str(out)],
        ["train", "--stage", "all", "--config", args.config,
         "--seed", str(args.seed), "--out", str(out)] + io,
        ["eval", "--checkpoint", str(out), "--config", args.config,
         "--split", "test", "--report", str(out / "report.txt")] + io,
        ["sweep", "--checkpoint", str(out), "--config", args.config,
         "--np", "1,5,10", "--out", str(out / "sweep")] + io,
    ]
    for step in steps:
        print("+ convrec " + " ".join(step))
        rc = cli(step)
        if rc != 0:
            return rc
    print(f"done; report at {out / 'report.txt'}, sweep plots in {out / 'sweep'}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
