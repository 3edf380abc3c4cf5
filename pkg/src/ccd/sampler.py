"""Iterative unmasking engine.

Three step rules share one loop:

* baseline: predict every masked position once, decode the most confident
  ``b_t`` of them from those single-pass distributions.
* ccd: keep a sliding window of the last ``d`` iterations' shortlists.  A
  position that stayed on the shortlist across the whole window has been
  scored under several distinct partial contexts; averaging those
  distributions with the current one gives a context-marginalized
  distribution, and selection/decoding runs on that average instead.
* ccd-ds: same machinery, but the number of tokens decoded per step adapts.
  Everything in the agreement set is taken when it fits the quota;
  beyond-quota positions are taken only with extra evidence (averaged
  entropy below a cutoff, or an argmax that never moved across the window).

Shortlists pushed into the history window are snapshotted after the step's
decode, over the positions that are still masked, so sustained agreement can
cover a full shortlist per step instead of collapsing to one position.

Determinism contract: selection always scores the raw (untempered)
distributions; temperature applies only at the token draw; every tie breaks
toward the lower position index; draws consume exactly one uniform variate
per decoded position, in ascending position order.  The final permitted step
for a stretch of positions decodes everything still masked there (marked
``forced``), so a finished run never leaves a mask behind.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math
import random
from typing import Iterable, Mapping, Protocol, Sequence

from .buffer import HistoryBuffer
from .core import (
    METRIC_MAX_PROB,
    METRIC_NEG_ENTROPY,
    Distribution,
    SequenceState,
    Vocabulary,
    confidence,
    entropy,
    top_v_positions,
    validate_state,
)
from .jsonio import dumps_canonical, read_jsonl, write_jsonl

MODE_BASELINE = "baseline"
MODE_CCD = "ccd"
MODE_CCD_DS = "ccd-ds"
MODES = (MODE_BASELINE, MODE_CCD, MODE_CCD_DS)

RULE_STABILITY = "stability"
RULE_EPSILON = "epsilon"
RULES = (RULE_STABILITY, RULE_EPSILON)

TRACE_FORMAT = "ccd-trace-v1"


class Predictor(Protocol):
    """Anything that maps a partially decoded state to per-position distributions."""

    vocab: Vocabulary

    def __call__(self, state: SequenceState, need: Sequence[int]) -> dict[int, Distribution]:
        ...


class PredictorError(RuntimeError):
    pass


class OraclePredictor:
    """In-process adapter from an oracle object to the Predictor protocol.

    Output passes through the Distribution constructor, the same
    normalization applied to distributions arriving over the wire, so a
    process-local run and a remote run of the same model are bit-identical.
    """

    def __init__(self, oracle):
        self.oracle = oracle
        self.vocab = oracle.vocab

    def __call__(self, state: SequenceState, need: Sequence[int]) -> dict[int, Distribution]:
        produced = self.oracle.predict(state)
        out: dict[int, Distribution] = {}
        for i in sorted(need):
            if i not in produced:
                raise PredictorError(f"oracle produced no distribution for masked position {i}")
            out[i] = Distribution(produced[i].probs)
        return out


@dataclass(frozen=True)
class SamplerConfig:
    total_steps: int
    mode: str = MODE_BASELINE
    v: int = 4
    d: int = 3
    metric: str = METRIC_NEG_ENTROPY
    tau: float = 0.0
    threshold_rule: str = RULE_STABILITY
    epsilon: float = 0.05
    block_size: int | None = None
    seed: int = 0
    budget_schedule: tuple[tuple[int, int], ...] | None = None
    disable_history: bool = False
    preserve_buffer_across_blocks: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.metric not in (METRIC_NEG_ENTROPY, METRIC_MAX_PROB):
            raise ValueError(f"unknown confidence metric {self.metric!r}")
        if self.threshold_rule not in RULES:
            raise ValueError(f"unknown threshold rule {self.threshold_rule!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.v < 1 or self.d < 1:
            raise ValueError("v and d must be >= 1")
        if not (isinstance(self.tau, (int, float)) and math.isfinite(self.tau) and self.tau >= 0.0):
            raise ValueError("tau must be a finite float >= 0")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0.0):
            raise ValueError("epsilon must be a finite float >= 0")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block_size must be >= 1 when given")
        if self.budget_schedule is not None:
            if self.block_size is not None:
                raise ValueError("budget_schedule cannot be combined with block_size")
            for entry in self.budget_schedule:
                if len(entry) != 2 or entry[0] < 1 or entry[1] < 1:
                    raise ValueError(
                        f"budget_schedule entries must be (step, budget) pairs of positive ints, got {entry!r}")
            steps = [t for t, _ in self.budget_schedule]
            if len(set(steps)) != len(steps):
                raise ValueError("budget_schedule repeats a step index")
            canonical = tuple(sorted((int(t), int(b)) for t, b in self.budget_schedule))
            object.__setattr__(self, "budget_schedule", canonical)

    def budget_for(self, t: int, default: int) -> int:
        if self.budget_schedule is not None:
            for step, budget in self.budget_schedule:
                if step == t:
                    return budget
        return default

    def to_json(self) -> dict:
        out = {
            "total_steps": self.total_steps,
            "mode": self.mode,
            "v": self.v,
            "d": self.d,
            "metric": self.metric,
            "tau": self.tau,
            "threshold_rule": self.threshold_rule,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "disable_history": self.disable_history,
            "preserve_buffer_across_blocks": self.preserve_buffer_across_blocks,
            "debug": self.debug,
        }
        if self.block_size is not None:
            out["block_size"] = self.block_size
        if self.budget_schedule is not None:
            out["budget_schedule"] = {str(t): b for t, b in self.budget_schedule}
        return out

    @staticmethod
    def from_json(spec: Mapping, where: str = "config") -> "SamplerConfig":
        kwargs = dict(spec)
        schedule = kwargs.pop("budget_schedule", None)
        if schedule is not None:
            try:
                pairs = tuple(sorted((int(t), int(b)) for t, b in schedule.items()))
            except (AttributeError, TypeError, ValueError):
                raise ValueError(f"{where}.budget_schedule must map step index to budget")
            kwargs["budget_schedule"] = pairs
        try:
            return SamplerConfig(**kwargs)
        except TypeError as exc:
            raise ValueError(f"{where}: {exc}") from None


@dataclass
class DecodeStep:
    """One iteration of the loop, with everything needed to audit it."""

    t: int
    mode: str
    block: int
    budget_quota: int
    selected: list[int]
    tokens: list[int]
    entropies: list[float]
    dists: list[list[float]]
    fallback_used: bool
    forced: bool
    gate: list[int]
    gate_entropies: list[float]
    stable: list[bool]
    extra: list[int]
    buffer_slots: list[list[int]] | None = None

    def to_json(self) -> dict:
        out = {
            "kind": "step",
            "t": self.t,
            "mode": self.mode,
            "block": self.block,
            "budget": self.budget_quota,
            "selected": self.selected,
            "tokens": self.tokens,
            "entropies": self.entropies,
            "dists": self.dists,
            "fallback": self.fallback_used,
            "forced": self.forced,
            "gate": self.gate,
            "gate_entropies": self.gate_entropies,
            "stable": self.stable,
            "extra": self.extra,
        }
        if self.buffer_slots is not None:
            out["buffer_slots"] = self.buffer_slots
        return out

    @staticmethod
    def from_json(obj: Mapping) -> "DecodeStep":
        return DecodeStep(
            t=obj["t"],
            mode=obj["mode"],
            block=obj["block"],
            budget_quota=obj["budget"],
            selected=list(obj["selected"]),
            tokens=list(obj["tokens"]),
            entropies=[float(x) for x in obj["entropies"]],
            dists=[[float(p) for p in row] for row in obj["dists"]],
            fallback_used=obj["fallback"],
            forced=obj["forced"],
            gate=list(obj["gate"]),
            gate_entropies=[float(x) for x in obj["gate_entropies"]],
            stable=list(obj["stable"]),
            extra=list(obj["extra"]),
            buffer_slots=obj.get("buffer_slots"),
        )


@dataclass
class DecodeResult:
    config: SamplerConfig
    vocab: Vocabulary
    prompt: tuple[int, ...]
    final: tuple[int, ...]
    steps: list[DecodeStep]
    decode_dists: dict[int, Distribution] = field(repr=False, default_factory=dict)

    @property
    def steps_taken(self) -> int:
        return len(self.steps)

    @property
    def fallback_steps(self) -> int:
        return sum(1 for s in self.steps if s.fallback_used)

    @property
    def forced_steps(self) -> int:
        return sum(1 for s in self.steps if s.forced)


def _tempered(dist: Distribution, tau: float) -> Distribution:
    """Distribution actually sampled from at temperature tau.

    Computed in probability space (p ** (1/tau), renormalized), which for an
    exactly-represented model avoids a detour through logits.  tau == 1 is
    the identity on the probabilities; tau == 0 is handled by the caller.
    """
    if tau == 1.0:
        return dist
    inv = 1.0 / tau
    return Distribution([p ** inv for p in dist.probs])


def _draw_token(dist: Distribution, tau: float, rng: random.Random) -> int:
    if tau == 0.0:
        return dist.argmax()
    sampled = _tempered(dist, tau)
    r = rng.random()
    acc = 0.0
    last = 0
    for tok, p in enumerate(sampled.probs):
        if p <= 0.0:
            continue
        acc += p
        last = tok
        if r < acc:
            return tok
    return last


def _draw_all(selected: Sequence[int], dists: Mapping[int, Distribution], tau: float,
              rng: random.Random) -> dict[int, int]:
    # Ascending position order; one variate per position regardless of outcome.
    return {i: _draw_token(dists[i], tau, rng) for i in sorted(selected)}


def _predict(predictor: Predictor, state: SequenceState, need: Sequence[int]) -> dict[int, Distribution]:
    need = sorted(need)
    out = predictor(state, need)
    missing = [i for i in need if i not in out]
    if missing:
        raise PredictorError(f"predictor returned no distribution for positions {missing}")
    size = predictor.vocab.size
    for i in need:
        if len(out[i].probs) != size:
            raise PredictorError(
                f"predictor distribution at position {i} has {len(out[i].probs)} entries, expected {size}")
    return out


@dataclass
class _StepOutcome:
    tokens: dict[int, int]
    decode_dists: dict[int, Distribution]
    fallback_used: bool
    forced: bool
    gate: list[int]
    gate_entropies: dict[int, float]
    stable: dict[int, bool]
    extra: list[int]


def baseline_step(state: SequenceState, predictor: Predictor, cfg: SamplerConfig,
                  budget: int, rng: random.Random,
                  candidates: Iterable[int] | None = None,
                  closing: bool = False) -> _StepOutcome:
    masked = sorted(candidates) if candidates is not None else sorted(state.masked_positions())
    if not masked:
        raise ValueError("baseline_step called with no masked positions")
    dists = _predict(predictor, state, masked)
    scores = {i: confidence(dists[i], cfg.metric) for i in masked}
    selected = top_v_positions(scores, min(budget, len(masked)))
    forced = False
    if closing and len(selected) < len(masked):
        selected = masked
        forced = True
    tokens = _draw_all(selected, dists, cfg.tau, rng)
    return _StepOutcome(
        tokens=tokens,
        decode_dists={i: dists[i] for i in selected},
        fallback_used=False,
        forced=forced,
        gate=[],
        gate_entropies={},
        stable={},
        extra=[],
    )


def _ccd_common(state: SequenceState, predictor: Predictor, buf: HistoryBuffer,
                cfg: SamplerConfig, candidates: Iterable[int] | None):
    """Shared front half of ccd and ccd-ds: predict, shortlist, gate, average."""
    masked = sorted(candidates) if candidates is not None else sorted(state.masked_positions())
    if not masked:
        raise ValueError("step called with no masked positions")
    dists = _predict(predictor, state, masked)
    scores = {i: confidence(dists[i], cfg.metric) for i in masked}
    shortlist = top_v_positions(scores, cfg.v)
    current_top = {i: dists[i] for i in shortlist}
    if cfg.disable_history:
        gate: list[int] = []
    else:
        gate = sorted(buf.consistent_current(current_top))
    averaged: dict[int, Distribution] = {}
    gate_entropies: dict[int, float] = {}
    for i in gate:
        averaged[i] = buf.marginalize(current_top, i)
        gate_entropies[i] = entropy(averaged[i])
    return masked, dists, scores, current_top, gate, averaged, gate_entropies


def _stability_flags(buf: HistoryBuffer, current_top: Mapping[int, Distribution],
                     gate: Sequence[int]) -> dict[int, bool]:
    flags = {}
    for i in gate:
        contributing = buf.contributing(current_top, i)
        first = contributing[0].argmax()
        flags[i] = all(d.argmax() == first for d in contributing[1:])
    return flags


def _update_history(buf: HistoryBuffer, cfg: SamplerConfig, masked: Sequence[int],
                    scores: Mapping[int, float], dists: Mapping[int, Distribution],
                    tokens: Mapping[int, int]) -> None:
    """Post-decode shortlist snapshot: top-v over the positions left masked."""
    if cfg.disable_history:
        return
    remaining = {i: scores[i] for i in masked if i not in tokens}
    keep = top_v_positions(remaining, cfg.v) if remaining else []
    buf.push_iteration({i: dists[i] for i in keep})
    buf.purge(tokens.keys())


def ccd_step(state: SequenceState, predictor: Predictor, buf: HistoryBuffer,
             cfg: SamplerConfig, budget: int, rng: random.Random,
             candidates: Iterable[int] | None = None,
             closing: bool = False) -> _StepOutcome:
    masked, dists, scores, current_top, gate, averaged, gate_entropies = _ccd_common(
        state, predictor, buf, cfg, candidates)
    fallback = False
    forced = False
    if gate:
        ranked = sorted(gate, key=lambda i: (gate_entropies[i], i))
        selected = ranked[:min(budget, len(ranked))]
    else:
        selected = top_v_positions(scores, min(budget, len(masked)))
        # An intentionally empty history is the designed path, not a fallback.
        fallback = not cfg.disable_history
    if closing and len(selected) < len(masked):
        selected = masked
        forced = True
        fallback = True
    decode_dists = {i: averaged.get(i, dists[i]) for i in selected}
    tokens = _draw_all(selected, decode_dists, cfg.tau, rng)
    _update_history(buf, cfg, masked, scores, dists, tokens)
    return _StepOutcome(tokens, decode_dists, fallback, forced, gate, gate_entropies, {}, [])


def ccd_ds_step(state: SequenceState, predictor: Predictor, buf: HistoryBuffer,
                cfg: SamplerConfig, budget: int, rng: random.Random,
                candidates: Iterable[int] | None = None,
                closing: bool = False) -> _StepOutcome:
    masked, dists, scores, current_top, gate, averaged, gate_entropies = _ccd_common(
        state, predictor, buf, cfg, candidates)
    stable = _stability_flags(buf, current_top, gate) if gate else {}
    fallback = False
    forced = False
    extra: list[int] = []
    if gate:
        ranked = sorted(gate, key=lambda i: (gate_entropies[i], i))
        if len(ranked) <= budget:
            selected = ranked
        else:
            head = ranked[:budget]
            for i in ranked[budget:]:
                if cfg.threshold_rule == RULE_EPSILON:
                    ok = gate_entropies[i] < cfg.epsilon
                else:
                    ok = stable[i]
                if ok:
                    extra.append(i)
            selected = head + extra
    else:
        selected = top_v_positions(scores, min(budget, len(masked)))
        fallback = not cfg.disable_history
    if closing and len(selected) < len(masked):
        selected = masked
        forced = True
        fallback = True
        extra = []
    decode_dists = {i: averaged.get(i, dists[i]) for i in selected}
    tokens = _draw_all(selected, decode_dists, cfg.tau, rng)
    _update_history(buf, cfg, masked, scores, dists, tokens)
    return _StepOutcome(tokens, decode_dists, fallback, forced, gate, gate_entropies, stable, extra)


def _run_step(state: SequenceState, predictor: Predictor, buf: HistoryBuffer,
              cfg: SamplerConfig, budget: int, rng: random.Random,
              candidates: Sequence[int], closing: bool) -> _StepOutcome:
    if cfg.mode == MODE_BASELINE:
        return baseline_step(state, predictor, cfg, budget, rng,
                             candidates=candidates, closing=closing)
    if cfg.mode == MODE_CCD:
        return ccd_step(state, predictor, buf, cfg, budget, rng,
                        candidates=candidates, closing=closing)
    return ccd_ds_step(state, predictor, buf, cfg, budget, rng,
                       candidates=candidates, closing=closing)


def _decode_range(state: SequenceState, predictor: Predictor, cfg: SamplerConfig,
                  buf: HistoryBuffer, rng: random.Random, lo: int, hi: int,
                  steps_allowed: int, block_index: int,
                  steps_out: list[DecodeStep],
                  decode_dists_out: dict[int, Distribution]) -> SequenceState:
    initial = [i for i in range(lo, hi) if state.response[i] is None]
    default_budget = -(-len(initial) // steps_allowed)  # ceil
    for k in range(1, steps_allowed + 1):
        candidates = [i for i in range(lo, hi) if state.response[i] is None]
        if not candidates:
            break
        t = state.step
        budget = cfg.budget_for(t, default_budget)
        closing = k == steps_allowed
        outcome = _run_step(state, predictor, buf, cfg, budget, rng, candidates, closing)
        selected = sorted(outcome.tokens)
        step = DecodeStep(
            t=t,
            mode=cfg.mode,
            block=block_index,
            budget_quota=budget,
            selected=selected,
            tokens=[outcome.tokens[i] for i in selected],
            entropies=[entropy(outcome.decode_dists[i]) for i in selected],
            dists=[list(outcome.decode_dists[i].probs) for i in selected],
            fallback_used=outcome.fallback_used,
            forced=outcome.forced,
            gate=outcome.gate,
            gate_entropies=[outcome.gate_entropies[i] for i in outcome.gate],
            stable=[outcome.stable[i] for i in outcome.gate] if outcome.stable else [],
            extra=outcome.extra,
            buffer_slots=buf.slot_position_sets() if cfg.debug else None,
        )
        steps_out.append(step)
        decode_dists_out.update(outcome.decode_dists)
        state = state.with_decoded(outcome.tokens)
    remaining = [i for i in range(lo, hi) if state.response[i] is None]
    if remaining:
        raise RuntimeError(
            f"positions {remaining} still masked after {steps_allowed} permitted steps")
    return state


def decode(state: SequenceState, predictor: Predictor, cfg: SamplerConfig) -> DecodeResult:
    """Run the configured mode until every masked position is decoded."""
    if cfg.block_size is not None:
        return block_decode(state, predictor, cfg)
    validate_state(state, predictor.vocab)
    masked = state.masked_positions()
    if not masked:
        raise ValueError("decode needs at least one masked position")
    if state.step != cfg.total_steps:
        state = replace(state, step=cfg.total_steps)
    rng = random.Random(cfg.seed)
    buf = HistoryBuffer(cfg.d, cfg.v)
    steps: list[DecodeStep] = []
    decode_dists: dict[int, Distribution] = {}
    state = _decode_range(state, predictor, cfg, buf, rng, 0, len(state.response),
                          cfg.total_steps, 0, steps, decode_dists)
    final = tuple(tok for tok in state.response)
    return DecodeResult(cfg, predictor.vocab, state.prompt, final, steps, decode_dists)


def block_decode(state: SequenceState, predictor: Predictor, cfg: SamplerConfig) -> DecodeResult:
    """Decode contiguous blocks left to right, each under a prorated step budget.

    Block k of size B gets ceil(total_steps * B / N) steps, so the per-block
    pace follows the global one.  When N is not divisible by the block size
    the rounding can add a few steps beyond total_steps; a single
    full-length block reproduces decode() exactly.
    """
    if cfg.block_size is None:
        raise ValueError("block_decode requires cfg.block_size")
    validate_state(state, predictor.vocab)
    masked = state.masked_positions()
    if not masked:
        raise ValueError("block_decode needs at least one masked position")
    n = len(state.response)
    if set(masked) != set(range(n)):
        raise ValueError("block_decode expects a fully masked response")
    if state.step != cfg.total_steps:
        state = replace(state, step=cfg.total_steps)
    rng = random.Random(cfg.seed)
    buf = HistoryBuffer(cfg.d, cfg.v)
    steps: list[DecodeStep] = []
    decode_dists: dict[int, Distribution] = {}
    size = cfg.block_size
    edges = list(range(0, n, size)) + [n]
    for idx in range(len(edges) - 1):
        lo, hi = edges[idx], edges[idx + 1]
        steps_allowed = -(-cfg.total_steps * (hi - lo) // n)  # ceil(T * B / N)
        if idx > 0 and not cfg.preserve_buffer_across_blocks:
            buf.clear()
        state = _decode_range(state, predictor, cfg, buf, rng, lo, hi,
                              steps_allowed, idx, steps, decode_dists)
    final = tuple(tok for tok in state.response)
    return DecodeResult(cfg, predictor.vocab, state.prompt, final, steps, decode_dists)


# --- trace files ------------------------------------------------------------

def trace_objects(result: DecodeResult, oracle_spec: dict | None = None) -> list[dict]:
    header = {
        "kind": "header",
        "format": TRACE_FORMAT,
        "config": result.config.to_json(),
        "vocab": {
            "size": result.vocab.size,
            "mask_id": result.vocab.mask_id,
            "eos_id": result.vocab.eos_id,
        },
        "prompt": list(result.prompt),
        "length": len(result.final),
    }
    if oracle_spec is not None:
        header["oracle"] = oracle_spec
    objects = [header]
    objects.extend(step.to_json() for step in result.steps)
    objects.append({
        "kind": "final",
        "tokens": list(result.final),
        "steps_taken": result.steps_taken,
        "fallback_steps": result.fallback_steps,
        "forced_steps": result.forced_steps,
    })
    return objects


def write_trace(path: str, result: DecodeResult, oracle_spec: dict | None = None) -> None:
    write_jsonl(path, trace_objects(result, oracle_spec))


def trace_text(result: DecodeResult, oracle_spec: dict | None = None) -> str:
    return "".join(dumps_canonical(o) + "\n" for o in trace_objects(result, oracle_spec))


@dataclass
class Trace:
    header: dict
    steps: list[DecodeStep]
    final: dict

    @property
    def config(self) -> SamplerConfig:
        return SamplerConfig.from_json(self.header["config"], where="trace header config")

    @property
    def vocab(self) -> Vocabulary:
        v = self.header["vocab"]
        return Vocabulary(v["size"], v["mask_id"], v["eos_id"])

    @property
    def final_tokens(self) -> tuple[int, ...]:
        return tuple(self.final["tokens"])

    def decode_dists(self) -> dict[int, Distribution]:
        out: dict[int, Distribution] = {}
        for step in self.steps:
            for pos, row in zip(step.selected, step.dists):
                out[pos] = Distribution(row)
        return out


def parse_trace(objects: Sequence[dict]) -> Trace:
    if not objects:
        raise ValueError("trace is empty")
    header, *rest = objects
    if header.get("kind") != "header":
        raise ValueError("trace must start with a header object")
    if header.get("format") != TRACE_FORMAT:
        raise ValueError(f"unsupported trace format {header.get('format')!r}")
    if not rest or rest[-1].get("kind") != "final":
        raise ValueError("trace must end with a final object")
    final = rest[-1]
    steps = []
    for obj in rest[:-1]:
        if obj.get("kind") != "step":
            raise ValueError(f"unexpected trace object kind {obj.get('kind')!r}")
        steps.append(DecodeStep.from_json(obj))
    return Trace(header, steps, final)


def read_trace(path: str) -> Trace:
    return parse_trace(read_jsonl(path))


# --- legality audit ---------------------------------------------------------

def validate_trace_legality(trace: Trace) -> list[str]:
    """Replay a trace's records against the per-step decode rules.

    Returns a list of violations (empty means the trace is legal): every
    step decodes at least one token, only in-range positions, never a
    position twice; non-forced steps stay within the budget quota except for
    adaptive-mode extras, each of which must sit in the gate and carry its
    evidence (an averaged entropy below the cutoff, or a stable argmax).
    """
    problems: list[str] = []
    cfg = trace.config
    n = trace.header["length"]
    decoded: set[int] = set()
    for idx, step in enumerate(trace.steps):
        where = f"step {idx} (t={step.t})"
        if not step.selected:
            problems.append(f"{where}: decoded nothing")
            continue
        if len(step.selected) != len(set(step.selected)):
            problems.append(f"{where}: repeats a position within the step")
        if sorted(step.selected) != list(step.selected):
            problems.append(f"{where}: selected positions are not in ascending order")
        for pos in step.selected:
            if pos < 0 or pos >= n:
                problems.append(f"{where}: position {pos} outside the response")
            elif pos in decoded:
                problems.append(f"{where}: position {pos} was already decoded")
        gate_entropy = dict(zip(step.gate, step.gate_entropies))
        stable = dict(zip(step.gate, step.stable)) if step.stable else {}
        if step.forced:
            pass  # the closing step may decode everything left in its stretch
        elif len(step.selected) > step.budget_quota:
            over = len(step.selected) - step.budget_quota
            if step.mode != MODE_CCD_DS:
                problems.append(
                    f"{where}: decoded {len(step.selected)} with budget {step.budget_quota}")
            elif set(step.selected) - set(step.gate):
                outside = sorted(set(step.selected) - set(step.gate))
                problems.append(f"{where}: over-budget decode includes non-gate positions {outside}")
            else:
                if len(step.extra) != over:
                    problems.append(
                        f"{where}: {over} positions over budget but {len(step.extra)} marked extra")
                for pos in step.extra:
                    if pos not in gate_entropy:
                        problems.append(f"{where}: extra position {pos} is not in the gate")
                    elif cfg.threshold_rule == RULE_EPSILON:
                        if not gate_entropy[pos] < cfg.epsilon:
                            problems.append(
                                f"{where}: extra position {pos} has averaged entropy "
                                f"{gate_entropy[pos]:.6f} >= epsilon {cfg.epsilon}")
                    elif not stable.get(pos, False):
                        problems.append(f"{where}: extra position {pos} lacks a stable argmax")
        if (step.mode != MODE_BASELINE and step.gate and not step.forced
                and not step.fallback_used):
            outside = sorted(set(step.selected) - set(step.gate))
            if outside:
                problems.append(f"{where}: decoded {outside} outside the agreement set")
        decoded.update(step.selected)
    if len(decoded) != n:
        missing = sorted(set(range(n)) - decoded)
        problems.append(f"trace never decodes positions {missing}")
    if trace.final.get("steps_taken") != len(trace.steps):
        problems.append("final record disagrees with the number of step records")
    if trace.final_tokens and len(trace.final_tokens) != n:
        problems.append("final token count disagrees with the header length")
    return problems
