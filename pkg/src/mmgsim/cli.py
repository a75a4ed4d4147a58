"""Command-line interface.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .scenario import DEFAULT_SCENARIO, ConfigError, SimulationError, build_topology, load_config, run

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmgsim", description="Unbalanced multi-microgrid ESS control simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log events and progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a scenario and write telemetry CSV")
    r.add_argument("config", nargs="?", default=str(DEFAULT_SCENARIO),
                   help="scenario file (default: shipped default scenario)")
    r.add_argument("--out", help="output directory (default: [output] dir)")
    r.add_argument("--horizon", type=float, help="override the simulated horizon in seconds")
    r.add_argument("--quiet", action="store_true", help="suppress the summary")

    v = sub.add_parser("validate", help="check a scenario file and report every problem")
    v.add_argument("config")

    f = sub.add_parser("fixture", help="fixture generation helpers")
    fsub = f.add_subparsers(dest="fixture", required=True, parser_class=_Parser)
    fv = fsub.add_parser("vuf", help="size the phase-a extra load for a target open-loop VUF")
    fv.add_argument("config", nargs="?", default=str(DEFAULT_SCENARIO))
    fv.add_argument("--target", type=float, default=4.3, help="target VUF in percent")
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.horizon is not None and not args.horizon > 0:
        raise ConfigError(["--horizon must be positive"])
    out = Path(args.out) if args.out else Path(cfg["output"]["dir"])
    result = run(cfg, horizon=args.horizon, out_dir=out, progress=args.verbose)
    if not args.quiet:
        print(result.summary.format())
        print(f"telemetry written to {result.csv_path}")
        for t, kind, detail in result.diagnostics[:10]:
            print(f"diagnostic t={t:.4f} s {kind}: {detail}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"{args.config}: OK ({len(cfg.events)} events)")
    return EXIT_OK


def _cmd_fixture_vuf(args) -> int:
    from .plant import fit_unbalance

    cfg = load_config(args.config)
    if not 0 < args.target < 100:
        raise ConfigError(["--target must be in (0, 100)"])
    load, achieved = fit_unbalance(build_topology(cfg), cfg["ratings"]["p_mppt_w"], args.target)
    print(f"extra_a_p_w = {load.p!r}")
    print(f"extra_a_q_var = {load.q!r}")
    print(f"# open-loop VUF {achieved:.4f} %")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "validate": _cmd_validate}.get(args.command)
    if args.command == "fixture":
        handler = _cmd_fixture_vuf
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
