#!/usr/bin/env python3
"""Calibrate, then run exp-a, exp-b and exp-c into one output directory."""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from daqflow.cli import default_out_dir
from daqflow.experiments import run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=default_out_dir())
    ap.add_argument("--skip-calibration", action="store_true",
                    help="reuse OUT/calibration.txt if present")
    args = ap.parse_args()
    cal = args.out / "calibration.txt"
    if not (args.skip_calibration and cal.exists()):
        t0 = time.perf_counter()
        cal = run_experiment("calibrate", out_dir=args.out).calibration_path
        print(f"calibrate: {time.perf_counter() - t0:.1f} s -> {cal}")
    for name in ("exp-a", "exp-b", "exp-c"):
        t0 = time.perf_counter()
        res = run_experiment(name, out_dir=args.out, calibration=cal)
        print(f"{name}: {len(res.snapshot.rows)} rows in {time.perf_counter() - t0:.1f} s -> {res.csv_path}")


if __name__ == "__main__":
    main()
