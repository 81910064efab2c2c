#!/usr/bin/env python3
"""End-to-end toy experiment: generate the forward-vs-reversed task, train the
gated mini network and its ungated twin on one core, and print both scores.

Usage: python scripts/run_toy_experiment.py [OUTDIR]   (default ./runs/toy)
"""

import csv
import os
import sys
import time
from pathlib import Path

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

from srtg.cli import main as cli  # noqa: E402  (env vars must precede numpy)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def best_top1(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return max(float(r["top1"]) for r in rows)


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/toy")
    data = out / "data"
    assert cli(["gen-data", "--config", str(CONFIGS / "toy_data.cfg"), "--out", str(data)]) == 0

    runs = {
        "gated": [],
        "ungated": ["--set", "network.placement=none"],
    }
    scores = {}
    for tag, extra in runs.items():
        run_dir = out / tag
        started = time.perf_counter()
        rc = cli([
            "train", "--config", str(CONFIGS / "toy.cfg"), "--out", str(run_dir),
            "--set", f"data.train={data / 'train.bin'}",
            "--set", f"data.val={data / 'val.bin'}",
            *extra,
        ])
        assert rc == 0
        scores[tag] = (best_top1(run_dir / "metrics.csv"), time.perf_counter() - started)

    print()
    for tag, (top1, secs) in scores.items():
        print(f"{tag:<8} best val top-1 = {top1:.3f}   ({secs:.0f}s)")


if __name__ == "__main__":
    main()
