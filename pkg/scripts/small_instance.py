#!/usr/bin/env python3
"""Print the message trace of the small hand-checked instance."""

from __future__ import annotations

import sys
from pathlib import Path

from daqflow.config import load_config
from daqflow.scenario import run_scenario

CFG = Path(__file__).resolve().parent.parent / "tests" / "data" / "small_instance.cfg"

if __name__ == "__main__":
    run_scenario(load_config(CFG), trace=sys.stdout)
