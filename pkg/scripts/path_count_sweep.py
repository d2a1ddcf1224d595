#!/usr/bin/env python3
"""Sweep the number of candidate paths fed to the decoder against an already
trained checkpoint directory and render the hit/explainability curves.

Usage: python scripts/path_count_sweep.py --checkpoint runs/toy --np 1,3,5,10
"""

import argparse
import sys
from pathlib import Path

from convrec.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent


def run(argv=None):
    parser = argparse.ArgumentParser()
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--np", default="1,5,10")
    parser.add_argument("--config", default=str(ROOT / "configs" / "toy.cfg"))
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    ckpt = Path(args.checkpoint)
    out = args.out or str(ckpt / "sweep")
    return cli([
        "sweep", "--checkpoint", str(ckpt), "--config", args.config,
        "--np", args.np, "--out", out,
        "--kg", str(ckpt / "kg.tsv"), "--corpus", str(ckpt / "corpus.jsonl"),
    ])


if __name__ == "__main__":
    sys.exit(run())
