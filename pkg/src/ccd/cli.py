"""Command line entry point: ccd run | sweep | verify | serve-check."""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (
    ConfigError,
    build_run,
    build_sweep,
    configure_logging,
    execute_run,
    load_json_file,
    run_sweep,
)
from .jsonio import dumps_canonical
from .protocol import ProtocolError, serve_check


def _run_overrides(args) -> dict:
    sampler = {}
    if args.mode is not None:
        sampler["mode"] = args.mode
    if args.steps is not None:
        sampler["total_steps"] = args.steps
    if args.tau is not None:
        sampler["tau"] = args.tau
    if args.seed is not None:
        sampler["seed"] = args.seed
    top = {}
    if args.oracle is not None:
        top["oracle"] = args.oracle
    if args.length is not None:
        top["length"] = args.length
    if args.transport is not None:
        top["transport"] = args.transport
    if args.trace is not None:
        top["trace"] = args.trace
    if args.report is not None:
        top["report"] = args.report
    if sampler:
        top["sampler"] = sampler
    return top


def cmd_run(args) -> int:
    config: dict = {}
    if args.config:
        loaded = load_json_file(args.config)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: run config must be a JSON object")
        config = loaded
    overrides = _run_overrides(args)
    sampler = {**config.get("sampler", {}), **overrides.pop("sampler", {})}
    config = {**config, **overrides}
    if sampler:
        config["sampler"] = sampler
    plan = build_run(config)
    _, report = execute_run(plan)
    print(dumps_canonical(report))
    return 0


def cmd_sweep(args) -> int:
    loaded = load_json_file(args.config)
    if not isinstance(loaded, dict):
        raise ConfigError(f"{args.config}: sweep config must be a JSON object")
    if args.csv is not None:
        loaded["csv"] = args.csv
    if args.reports is not None:
        loaded["reports"] = args.reports
    plan = build_sweep(loaded)
    rows = run_sweep(plan)
    print(f"{len(rows)} runs completed", file=sys.stderr)
    if not plan.csv_path and not plan.reports_path:
        for row in rows:
            print(dumps_canonical(row))
    return 0


def cmd_verify(args) -> int:
    from .acceptance import run_acceptance  # deferred: pulls in every module

    results = run_acceptance(include_secondary=args.secondary, only=args.only)
    if args.json:
        for r in results:
            print(dumps_canonical({"name": r.name, "passed": r.passed,
                                   "seconds": round(r.seconds, 3), "detail": r.detail}))
    else:
        for r in results:
            status = "PASS" if r.passed else "FAIL"
            print(f"{status} {r.name} ({r.seconds:.2f}s): {r.detail}")
    if not results:
        print("no checks matched the filter", file=sys.stderr)
        return 2
    return 0 if all(r.passed for r in results) else 1


def cmd_serve_check(args) -> int:
    oracle = None
    if args.oracle is not None:
        from .harness import build_oracle

        oracle = build_oracle(args.oracle)
    try:
        results = serve_check(args.transport, oracle=oracle,
                              length=args.length, timeout=args.timeout)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    except (ProtocolError, OSError) as exc:
        print(f"FAIL connect: {exc}")
        return 1
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name}: {r.detail}")
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccd",
        description="confidence-gated diffusion decoding over exactly solvable models")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="decode once and print the report")
    run.add_argument("--config", help="run config JSON file")
    run.add_argument("--oracle", help="oracle JSON file (overrides config)")
    run.add_argument("--length", type=int)
    run.add_argument("--steps", type=int, help="total step allowance")
    run.add_argument("--mode", choices=["baseline", "ccd", "ccd-ds"])
    run.add_argument("--tau", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--transport", help="predict via exec:CMD or tcp:HOST:PORT")
    run.add_argument("--trace", help="write the step trace to this JSONL file")
    run.add_argument("--report", help="write the report to this JSON file")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run a grid of configurations")
    sweep.add_argument("--config", required=True, help="sweep config JSON file")
    sweep.add_argument("--csv", help="write flat results here")
    sweep.add_argument("--reports", help="write one report JSON per line here")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="run the acceptance checks")
    verify.add_argument("--secondary", action="store_true",
                        help="include the remote-server transparency check")
    verify.add_argument("--only", help="substring filter on check names")
    verify.add_argument("--json", action="store_true", help="machine-readable output")
    verify.set_defaults(func=cmd_verify)

    check = sub.add_parser("serve-check", help="probe a predictor server for compliance")
    check.add_argument("--transport", required=True, help="exec:CMD or tcp:HOST:PORT")
    check.add_argument("--oracle", help="oracle JSON file to bit-compare replies against")
    check.add_argument("--length", type=int, help="response length used by the probes")
    check.add_argument("--timeout", type=float, default=30.0)
    check.set_defaults(func=cmd_serve_check)

    return parser


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
