#!/usr/bin/env python3
"""Run the acceptance suite and print only the per-criterion PASS/FAIL lines."""

from __future__ import annotations

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-s", "-q", str(ROOT / "tests" / "test_acceptance.py")],
        cwd=ROOT, capture_output=True, text=True,
    )
    lines = [ln for ln in proc.stdout.splitlines() if ln.startswith(("PASS criterion", "FAIL criterion"))]
    for ln in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
        print(ln)
    print(proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr)
    return proc.returncode


if __name__ == "__main__":
    sys.exit(main())
