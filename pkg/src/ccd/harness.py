"""Run and sweep orchestration over config files.

A run config is one JSON object:

    {
      "oracle": {...} | "path/to/oracle.json",
      "length": 8,                 // optional when the oracle fixes it
      "prompt": [1, 2],            // optional, default []
      "sampler": {"total_steps": 8, "mode": "ccd", ...},
      "transport": "exec:...",     // optional: predict over the wire instead
      "trace": "out/run.jsonl",    // optional trace destination
      "report": "out/report.json"  // optional report destination
    }

A sweep config wraps a base run with axes; every combination runs once per
seed and lands as one CSV row plus one JSON report line:

    {
      "base": {run config without trace/report},
      "sweep": {"tau": "default", "d": [1, 2, 4], "stay": [0.5, 0.9]},
      "seeds": 3,
      "csv": "out/sweep.csv",
      "reports": "out/sweep.jsonl"
    }

Config problems raise ConfigError with the offending field path; the CLI
maps them to exit code 2.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import csv
import io
import itertools
import json
import logging
import os
from typing import Mapping, Sequence

from .core import SequenceState, Vocabulary
from .jsonio import atomic_write_text, dumps_canonical
from .metrics import compute_report
from .oracles import Oracle, intrinsic_length, oracle_from_json
from .protocol import RemotePredictor
from .sampler import (
    DecodeResult,
    OraclePredictor,
    SamplerConfig,
    decode,
    parse_trace,
    trace_objects,
)

log = logging.getLogger("ccd.harness")

DEFAULT_TAU_GRID = (0.0, 0.1, 0.4, 0.7, 1.0)

SAMPLER_AXES = ("mode", "total_steps", "v", "d", "tau")
ORACLE_AXES = ("stay", "eta")

REPORT_COLUMNS = (
    "steps_taken", "fallback_steps", "forced_steps", "tokens_per_step",
    "mean_decode_entropy_bits", "ter_bits", "information_gain_nats", "final_non_eos",
)


class ConfigError(ValueError):
    pass


def load_json_file(path: str, what: str = "config"):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{what} file not found: {path}" if isinstance(exc, FileNotFoundError)
                          else f"cannot read {what} file {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def build_oracle(spec, where: str = "oracle") -> Oracle:
    """Accept either an inline oracle object or a path to an oracle file."""
    if isinstance(spec, str):
        loaded = load_json_file(spec, what="oracle")
        return build_oracle(loaded, where=f"{where}({spec})")
    try:
        return oracle_from_json(spec, where=where)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunPlan:
    oracle_spec: dict | None
    transport: str | None
    length: int
    prompt: tuple[int, ...]
    sampler: SamplerConfig
    trace_path: str | None = None
    report_path: str | None = None

    def oracle(self) -> Oracle | None:
        if self.oracle_spec is None:
            return None
        return build_oracle(self.oracle_spec)


_RUN_KEYS = {"oracle", "length", "prompt", "sampler", "transport", "trace", "report"}


def build_run(config: Mapping, where: str = "run") -> RunPlan:
    if not isinstance(config, Mapping):
        raise ConfigError(f"{where}: expected an object, got {type(config).__name__}")
    unknown = sorted(set(config) - _RUN_KEYS)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; expected {sorted(_RUN_KEYS)}")
    if "sampler" not in config:
        raise ConfigError(f"{where}.sampler: required")
    try:
        sampler = SamplerConfig.from_json(config["sampler"], where=f"{where}.sampler")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    oracle_spec = config.get("oracle")
    transport = config.get("transport")
    if oracle_spec is None and transport is None:
        raise ConfigError(f"{where}.oracle: required (or give {where}.transport)")
    oracle: Oracle | None = None
    if oracle_spec is not None:
        oracle = build_oracle(oracle_spec, where=f"{where}.oracle")
        if isinstance(oracle_spec, str):
            oracle_spec = oracle.to_json()
    if transport is not None and not isinstance(transport, str):
        raise ConfigError(f"{where}.transport: must be a string")

    length = config.get("length")
    if length is None and oracle is not None:
        length = intrinsic_length(oracle)
    if length is None:
        raise ConfigError(f"{where}.length: required (the oracle does not fix one)")
    if not isinstance(length, int) or length < 1:
        raise ConfigError(f"{where}.length: must be a positive integer, got {length!r}")
    fixed = intrinsic_length(oracle) if oracle is not None else None
    if fixed is not None and fixed != length:
        raise ConfigError(f"{where}.length: oracle fixes length {fixed}, got {length}")

    prompt = config.get("prompt", [])
    if not isinstance(prompt, list) or any(
            not isinstance(x, int) or isinstance(x, bool) for x in prompt):
        raise ConfigError(f"{where}.prompt: must be a list of integers")

    for key in ("trace", "report"):
        val = config.get(key)
        if val is not None and not isinstance(val, str):
            raise ConfigError(f"{where}.{key}: must be a path string")

    return RunPlan(
        oracle_spec=oracle_spec if oracle_spec is not None else None,
        transport=transport,
        length=length,
        prompt=tuple(prompt),
        sampler=sampler,
        trace_path=config.get("trace"),
        report_path=config.get("report"),
    )


def execute_run(plan: RunPlan) -> tuple[DecodeResult, dict]:
    oracle = plan.oracle()
    if plan.transport is not None:
        predictor = RemotePredictor(plan.transport)
        if oracle is not None and predictor.vocab != oracle.vocab:
            predictor.close()
            raise ConfigError(
                f"transport vocabulary {predictor.vocab} disagrees with the oracle's {oracle.vocab}")
    else:
        predictor = OraclePredictor(oracle)
    log.info("run: mode=%s length=%d steps=%d seed=%d", plan.sampler.mode,
             plan.length, plan.sampler.total_steps, plan.sampler.seed)
    try:
        state = SequenceState.initial(plan.prompt, plan.length, plan.sampler.total_steps)
        result = decode(state, predictor, plan.sampler)
    finally:
        if plan.transport is not None:
            predictor.close()
    trace = parse_trace(trace_objects(result, oracle_spec=plan.oracle_spec))
    report = compute_report(trace, oracle)
    if plan.trace_path:
        text = "".join(dumps_canonical(o) + "\n" for o in trace_objects(result, plan.oracle_spec))
        atomic_write_text(plan.trace_path, text)
        log.info("trace written to %s", plan.trace_path)
    if plan.report_path:
        atomic_write_text(plan.report_path, dumps_canonical(report) + "\n")
        log.info("report written to %s", plan.report_path)
    return result, report


# --- sweeps -------------------------------------------------------------------

@dataclass
class SweepPlan:
    base: Mapping
    axes: dict[str, list]
    seeds: list[int]
    csv_path: str | None
    reports_path: str | None


def build_sweep(config: Mapping, where: str = "sweep") -> SweepPlan:
    if not isinstance(config, Mapping):
        raise ConfigError(f"{where}: expected an object")
    if "base" not in config or not isinstance(config["base"], Mapping):
        raise ConfigError(f"{where}.base: required object (a run config)")
    axes_spec = config.get("sweep")
    if not isinstance(axes_spec, Mapping) or not axes_spec:
        raise ConfigError(f"{where}.sweep: required non-empty object of axis lists")
    axes: dict[str, list] = {}
    for name in sorted(axes_spec):
        if name not in SAMPLER_AXES + ORACLE_AXES:
            raise ConfigError(
                f"{where}.sweep.{name}: unknown axis; expected one of "
                f"{sorted(SAMPLER_AXES + ORACLE_AXES)}")
        values = axes_spec[name]
        if values == "default":
            if name != "tau":
                raise ConfigError(f"{where}.sweep.{name}: only tau has a default grid")
            values = list(DEFAULT_TAU_GRID)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{where}.sweep.{name}: must be a non-empty list")
        axes[name] = values
    seeds_spec = config.get("seeds", 1)
    if isinstance(seeds_spec, int):
        if seeds_spec < 1:
            raise ConfigError(f"{where}.seeds: must be >= 1")
        seeds = list(range(seeds_spec))
    elif isinstance(seeds_spec, list) and seeds_spec and all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds_spec):
        seeds = list(seeds_spec)
    else:
        raise ConfigError(f"{where}.seeds: must be a count or a list of integers")
    base = dict(config["base"])
    for key in ("trace", "report"):
        if key in base:
            raise ConfigError(f"{where}.base.{key}: per-run outputs are not allowed in sweeps")
    build_run(base, where=f"{where}.base")  # validate eagerly, before any cell runs
    return SweepPlan(
        base=base,
        axes=axes,
        seeds=seeds,
        csv_path=config.get("csv"),
        reports_path=config.get("reports"),
    )


def _apply_axis(base: dict, name: str, value) -> None:
    if name in SAMPLER_AXES:
        base["sampler"] = {**base["sampler"], name: value}
        return
    oracle = base.get("oracle")
    if not isinstance(oracle, Mapping):
        raise ConfigError(f"sweep axis {name} needs an inline oracle object to rewrite")
    if name == "stay":
        if oracle.get("type") != "symmetric-chain":
            raise ConfigError('sweep axis "stay" needs an oracle of type "symmetric-chain"')
        base["oracle"] = {**oracle, "stay": value}
    elif name == "eta":
        if oracle.get("type") != "noisy":
            raise ConfigError('sweep axis "eta" needs an oracle of type "noisy"')
        base["oracle"] = {**oracle, "eta": value}


def run_sweep(plan: SweepPlan) -> list[dict]:
    """Execute every cell x seed; returns the flat row dicts in run order."""
    names = sorted(plan.axes)
    rows: list[dict] = []
    total = 1
    for name in names:
        total *= len(plan.axes[name])
    total *= len(plan.seeds)
    done = 0
    for combo in itertools.product(*(plan.axes[n] for n in names)):
        cell = dict(plan.base)
        cell["sampler"] = dict(cell["sampler"])
        for name, value in zip(names, combo):
            _apply_axis(cell, name, value)
        for seed in plan.seeds:
            cell["sampler"]["seed"] = seed
            run_plan = build_run(cell, where="sweep.base")
            _, report = execute_run(run_plan)
            row = {name: value for name, value in zip(names, combo)}
            row["seed"] = seed
            row["mode"] = report["mode"]
            row["length"] = report["length"]
            for column in REPORT_COLUMNS:
                row[column] = report[column]
            rows.append(row)
            done += 1
            log.info("sweep %d/%d %s seed=%d", done, total,
                     dict(zip(names, combo)), seed)
    if plan.csv_path:
        atomic_write_text(plan.csv_path, rows_to_csv(rows))
    if plan.reports_path:
        atomic_write_text(plan.reports_path,
                          "".join(dumps_canonical(r) + "\n" for r in rows))
    return rows


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return out.getvalue()


def configure_logging() -> None:
    """Honor CCD_LOG=debug|info|warning|error on the package logger."""
    level_name = os.environ.get("CCD_LOG", "").strip().lower()
    if not level_name:
        return
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warning": logging.WARNING, "error": logging.ERROR}.get(level_name)
    if level is None:
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("ccd")
    root.setLevel(level)
    root.addHandler(handler)
