"""Command line entry point.

    daqflow run <config> [--out DIR] [--set key=value ...] [--trace]
    daqflow exp <name> [--out DIR] [--set key=value ...] [--param key=value ...]
                [--calibration FILE] [--trace]
    daqflow rerun <csv> [--out DIR]

Exit codes: 0 success, 2 invariant violation, 3 configuration error.
The default output directory is ``$DAQFLOW_OUT`` or ``./out``.
"""

from __future__ import annotations

import argparse
import ast
from contextlib import nullcontext
import os
import sys
from pathlib import Path

from .config import ScenarioConfig, capacity_warnings, load_config, parse_set_options, with_overrides
from .experiments import CALIBRATION_FILE, EXPERIMENTS, rerun_from_csv, run_experiment
from .metrics import emit_metrics_csv
from .model import ConfigError, ProtocolError
from .scenario import InvariantViolation, run_scenario

EXIT_OK = 0
EXIT_INVARIANT = 2
EXIT_CONFIG = 3
OUT_ENV = "DAQFLOW_OUT"


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV) or "out")


def _base_config(path: str | None, sets: list[str]) -> ScenarioConfig:
    cfg = load_config(path) if path else ScenarioConfig()
    return with_overrides(cfg, parse_set_options(sets))


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _base_config(args.config, args.set)
    for w in capacity_warnings(cfg):
        print(f"warning: {w}", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.tsv"
    with open(trace_path, "w") if args.trace else nullcontext() as trace:
        res = run_scenario(cfg, trace=trace)
    csv_path = out / "run.csv"
    emit_metrics_csv(res.snapshot(), csv_path)
    m = res.metrics
    if m:
        print(f"l1 events {m['l1_events']}  eb built {m['eb_built']}  collect mean {m['collect_us_mean']:.1f} us"
              f"  rob hwm {m['ros_rob_hwm_bytes']} B  xoff {m['ros_xoff_events']}")
    for v in res.violations:
        print(f"violation: {v}", file=sys.stderr)
    print(f"wrote {csv_path}" + (f" and {trace_path}" if args.trace else ""))
    return EXIT_INVARIANT if res.violations else EXIT_OK


def _cmd_exp(args: argparse.Namespace) -> int:
    cfg = _base_config(args.config, args.set)
    params = parse_params(args.param)
    out = Path(args.out)
    calibration = args.calibration
    if calibration is None and args.name != "calibrate" and (out / CALIBRATION_FILE).exists():
        calibration = str(out / CALIBRATION_FILE)
        print(f"using calibration {calibration}")
    result = run_experiment(args.name, cfg, out_dir=out, calibration=calibration, params=params)
    if args.trace:
        # experiment drivers run many kernels; the trace records one full scenario at the base config
        with open(out / f"{args.name}.trace.tsv", "w") as fh:
            run_scenario(cfg, trace=fh)
    print(f"wrote {result.csv_path} ({len(result.snapshot.rows)} rows)")
    if result.calibration_path:
        print(f"wrote {result.calibration_path}")
    return EXIT_OK


def _cmd_rerun(args: argparse.Namespace) -> int:
    result = rerun_from_csv(args.csv, out_dir=args.out)
    print(f"wrote {result.csv_path}")
    return EXIT_OK


def parse_params(items: list[str]) -> dict:
    """Experiment sweep parameters; values are Python literals (lists become tuples)."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--param {item!r}: expected key=value")
        try:
            v = ast.literal_eval(value.strip())
        except (ValueError, SyntaxError):
            raise ConfigError(f"--param {key.strip()}: invalid value {value!r}") from None
        out[key.strip()] = tuple(v) if isinstance(v, list) else v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daqflow", description="DataFlow discrete-event simulator")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=str(default_out_dir()), help=f"output directory (default ${OUT_ENV} or ./out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--trace", action="store_true", help="write a kernel trace")

    r = sub.add_parser("run", parents=[common], help="run one scenario from a config file")
    r.add_argument("config", nargs="?", help="key = value config file (defaults if omitted)")
    r.set_defaults(fn=_cmd_run)

    e = sub.add_parser("exp", parents=[common], help="run a canned experiment")
    e.add_argument("name", help=" | ".join(EXPERIMENTS))
    e.add_argument("--config", help="base config file")
    e.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="sweep parameter")
    e.add_argument("--calibration", help="calibration file (default: <out>/calibration.txt if present)")
    e.set_defaults(fn=_cmd_exp)

    rr = sub.add_parser("rerun", help="re-run the experiment recorded in a CSV")
    rr.add_argument("csv")
    rr.add_argument("--out", default=str(default_out_dir()))
    rr.set_defaults(fn=_cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantViolation, ProtocolError) as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
