"""Information-theoretic measurements over oracles, runs, and traces.

Conventions: entropies and divergences are computed in nats internally; the
quantities reported per token are converted to bits where the name says so.
0 * ln(0) terms drop out; an absolutely discontinuous pair (p puts mass where
q has none) yields +inf explicitly rather than raising.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
import math
from typing import Mapping, Sequence

from .core import Distribution, SequenceState, derive_seed, entropy
from .oracles import (
    NoisyOracle,
    Oracle,
    enumerate_joint,
    exact_marginal,
    mutual_information_token_rest,
    _resolve_length,
)
from .sampler import DecodeResult, OraclePredictor, SamplerConfig, Trace, decode

LN2 = math.log(2.0)


def kl_nats(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q); +inf when p puts mass where q has none."""
    if len(p) != len(q):
        raise ValueError("distributions differ in length")
    total = 0.0
    for a, b in zip(p, q):
        if a <= 0.0:
            continue
        if b <= 0.0:
            return math.inf
        total += a * math.log(a / b)
    return max(total, 0.0)


def cross_entropy_nats(p: Sequence[float], q: Sequence[float]) -> float:
    """-sum p ln q; +inf when p puts mass where q has none."""
    if len(p) != len(q):
        raise ValueError("distributions differ in length")
    total = 0.0
    for a, b in zip(p, q):
        if a <= 0.0:
            continue
        if b <= 0.0:
            return math.inf
        total -= a * math.log(b)
    return total


def ter_bits(marginals: Mapping[int, Distribution],
             decode_dists: Mapping[int, Distribution]) -> float:
    """Mean per-token cross-entropy, in bits, of decode laws against marginals.

    Averages -E_{v ~ marginal_i}[log2 decode_i(v)] over positions.  When the
    decode distributions equal the true marginals this is exactly the mean
    marginal entropy; any deviation strictly increases it.
    """
    if not marginals:
        raise ValueError("no positions to score")
    missing = sorted(set(marginals) - set(decode_dists))
    if missing:
        raise ValueError(f"decode distributions missing positions {missing}")
    total = 0.0
    for i, marginal in marginals.items():
        ce = cross_entropy_nats(marginal.probs, decode_dists[i].probs)
        if math.isinf(ce):
            return math.inf
        total += ce
    return total / (len(marginals) * LN2)


def oracle_marginals(oracle: Oracle, length: int | None = None,
                     prompt: Sequence[int] = ()) -> dict[int, Distribution]:
    n = _resolve_length(oracle, length, "oracle_marginals")
    return {i: exact_marginal(oracle, i, prompt, n) for i in range(n)}


@dataclass(frozen=True)
class ChainRuleDecomposition:
    """H(marginal) = H(token | rest) + I(token ; rest), each term computed
    by its own route so the identity is a real consistency check."""

    marginal_entropy: float
    conditional_entropy: float
    mutual_information: float

    @property
    def residual(self) -> float:
        return self.marginal_entropy - (self.conditional_entropy + self.mutual_information)


def chain_rule_decomposition(oracle: Oracle, i: int, prompt: Sequence[int] = (),
                             length: int | None = None) -> ChainRuleDecomposition:
    if isinstance(oracle, NoisyOracle):
        # exact_marginal for a corrupted predictor is a predictor-limit, not a
        # data-law marginal; the three routes would measure different laws.
        raise ValueError("chain_rule_decomposition needs a self-consistent oracle")
    n = _resolve_length(oracle, length, "chain_rule_decomposition")
    if not 0 <= i < n:
        raise ValueError(f"position {i} outside response of length {n}")
    marginal = entropy(exact_marginal(oracle, i, prompt, n))
    joint = enumerate_joint(oracle, n, prompt)
    rest_mass: dict[tuple, float] = {}
    for x, p in joint.items():
        if p <= 0.0:
            continue
        rest = x[:i] + x[i + 1:]
        rest_mass[rest] = rest_mass.get(rest, 0.0) + p
    conditional = 0.0
    for x, p in joint.items():
        if p <= 0.0:
            continue
        rest = x[:i] + x[i + 1:]
        conditional -= p * math.log(p / rest_mass[rest])
    mi = mutual_information_token_rest(oracle, i, prompt, length=n)
    return ChainRuleDecomposition(marginal, conditional, mi)


def trajectory_information_gain(result: DecodeResult | Trace, oracle: Oracle,
                                prompt: Sequence[int] = ()) -> float:
    """Mean over positions of H(exact marginal) - H(decode-time distribution).

    Measures how much the decoder's per-token uncertainty at commit time sat
    below the context-free uncertainty; context carries information exactly
    when this is positive on average.
    """
    if isinstance(result, Trace):
        dists = result.decode_dists()
        n = result.header["length"]
    else:
        dists = result.decode_dists
        n = len(result.final)
    if set(dists) != set(range(n)):
        raise ValueError("decode distributions do not cover every position")
    total = 0.0
    for i in range(n):
        total += entropy(exact_marginal(oracle, i, prompt, n)) - entropy(dists[i])
    return total / n


def empirical_sampling_kl(oracle: Oracle, cfg: SamplerConfig, length: int,
                          prompt: Sequence[int] = (), trials: int = 20000,
                          seed: int = 0) -> float:
    """KL(empirical decode law || exact data law) over whole sequences.

    Runs the configured decoder `trials` times under derived seeds, counts
    final sequences, and smooths the empirical law with a pseudocount of
    1/(trials * support) so the estimate is finite on the law's support.
    Any decoded sequence outside the support makes the divergence +inf.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    target = {x: p for x, p in enumerate_joint(oracle, length, prompt).items() if p > 0.0}
    predictor = OraclePredictor(oracle)
    counts: Counter = Counter()
    for k in range(trials):
        run_cfg = replace(cfg, seed=derive_seed(seed, f"trial-{k}"))
        state = SequenceState.initial(prompt, length, cfg.total_steps)
        counts[decode(state, predictor, run_cfg).final] += 1
    if set(counts) - set(target):
        return math.inf
    support = len(target)
    alpha = 1.0 / (trials * support)
    denom = trials + alpha * support
    total = 0.0
    for x, p in target.items():
        phat = (counts.get(x, 0) + alpha) / denom
        total += phat * math.log(phat / p)
    return max(total, 0.0)


def cet_curve(trace: Trace) -> list[int]:
    """Cumulative count of committed non-EOS tokens after each step."""
    eos = trace.vocab.eos_id
    out = []
    running = 0
    for step in trace.steps:
        running += sum(1 for tok in step.tokens if tok != eos)
        out.append(running)
    return out


def _jsonable(x: float | None):
    if x is None:
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def compute_report(trace: Trace, oracle: Oracle | None = None) -> dict:
    """Summary metrics for one finished run, JSON-ready.

    Oracle-dependent entries (ter_bits, information_gain_nats) are null when
    no oracle is supplied; infinities are serialized as the strings "inf" /
    "-inf" since JSON has no literal for them.
    """
    n = trace.header["length"]
    steps = trace.steps
    tokens_decoded = sum(len(s.selected) for s in steps)
    entropies = [h for s in steps for h in s.entropies]
    mean_h = sum(entropies) / len(entropies) if entropies else 0.0
    report = {
        "mode": trace.config.mode,
        "length": n,
        "steps_taken": len(steps),
        "fallback_steps": sum(1 for s in steps if s.fallback_used),
        "forced_steps": sum(1 for s in steps if s.forced),
        "tokens_per_step": tokens_decoded / len(steps) if steps else 0.0,
        "mean_decode_entropy_bits": mean_h / LN2,
        "cet": cet_curve(trace),
        "final_non_eos": sum(1 for tok in trace.final_tokens if tok != trace.vocab.eos_id),
        "ter_bits": None,
        "information_gain_nats": None,
    }
    if oracle is not None:
        prompt = tuple(trace.header.get("prompt", ()))
        marginals = {i: exact_marginal(oracle, i, prompt, n) for i in range(n)}
        report["ter_bits"] = _jsonable(ter_bits(marginals, trace.decode_dists()))
        report["information_gain_nats"] = _jsonable(
            trajectory_information_gain(trace, oracle, prompt))
    return report
