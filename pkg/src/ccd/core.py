"""Primitive types and deterministic numeric helpers shared by every module.

Probability arithmetic in this file is plain left-to-right float arithmetic
on Python lists.  That is deliberate: external predictor implementations
mirror the exact IEEE-754 operation sequences so a remote decode can
reproduce an in-process decode bit for bit.  Keep fsum, numpy, and clever
reorderings out of the prediction path.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

U64 = (1 << 64) - 1

METRIC_NEG_ENTROPY = "negative-entropy"
METRIC_MAX_PROB = "max-probability"
METRICS = (METRIC_NEG_ENTROPY, METRIC_MAX_PROB)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance one splitmix64 step; returns (new_state, output word)."""
    state = (state + 0x9E3779B97F4A7C15) & U64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & U64
    return state, z ^ (z >> 31)


def mix64(h: int, value: int) -> int:
    """Absorb one non-negative integer into a 64-bit digest state."""
    _, out = splitmix64((h ^ (value & U64)) & U64)
    return out


def unit_float(word: int) -> float:
    """Map a 64-bit word to [0, 1) exactly as (word >> 11) * 2**-53."""
    return (word >> 11) * 1.1102230246251565e-16


def derive_seed(root: int, label: str) -> int:
    """Stable per-purpose seed split: blake2b over "root:label", 63 bits."""
    raw = hashlib.blake2b(f"{root}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(raw, "big") & ((1 << 63) - 1)


@dataclass(frozen=True)
class Vocabulary:
    """Decodable alphabet {0..size-1} plus the out-of-alphabet mask id.

    eos_id must lie inside the alphabet; mask_id must lie outside it.  When
    omitted, mask_id defaults to size and eos_id to size-1.
    """

    size: int
    mask_id: int = -1
    eos_id: int = -1

    def __post_init__(self) -> None:
        if self.size < 1:
            raise ValueError(f"vocabulary size must be >= 1, got {self.size}")
        if self.mask_id == -1:
            object.__setattr__(self, "mask_id", self.size)
        if self.eos_id == -1:
            object.__setattr__(self, "eos_id", self.size - 1)
        if 0 <= self.mask_id < self.size:
            raise ValueError(f"mask_id {self.mask_id} must be outside 0..{self.size - 1}")
        if not 0 <= self.eos_id < self.size:
            raise ValueError(f"eos_id {self.eos_id} must be inside 0..{self.size - 1}")


class Distribution:
    """Probability vector over the decodable alphabet.

    The constructor validates (finite, non-negative, positive mass) and
    normalizes with a plain sum and elementwise divide.  A sum of exactly 1.0
    is left untouched so renormalizing an already-normalized vector is the
    identity.
    """

    __slots__ = ("probs",)

    def __init__(self, probs: Iterable[float]):
        vals = [float(p) for p in probs]
        if not vals:
            raise ValueError("empty probability vector")
        total = 0.0
        for p in vals:
            if not math.isfinite(p) or p < 0.0:
                raise ValueError(f"invalid probability entry {p!r}")
            total += p
        if total <= 0.0:
            raise ValueError("probability vector has zero mass")
        if total != 1.0:
            vals = [p / total for p in vals]
        self.probs: tuple[float, ...] = tuple(vals)

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, k: int) -> float:
        return self.probs[k]

    def __iter__(self):
        return iter(self.probs)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Distribution) and self.probs == other.probs

    def __repr__(self) -> str:
        return f"Distribution({list(self.probs)!r})"

    def argmax(self) -> int:
        """Index of the largest probability; ties go to the lowest index."""
        best, best_p = 0, self.probs[0]
        for k, p in enumerate(self.probs):
            if p > best_p:
                best, best_p = k, p
        return best


def entropy(p: Distribution | Sequence[float]) -> float:
    """Shannon entropy in nats with the 0*ln(0)=0 convention."""
    h = 0.0
    for q in p:
        if q > 0.0:
            h -= q * math.log(q)
    return h


def confidence(p: Distribution, metric: str) -> float:
    """Scalar selection score: higher means decode sooner."""
    if metric == METRIC_NEG_ENTROPY:
        return -entropy(p)
    if metric == METRIC_MAX_PROB:
        return max(p.probs)
    raise ValueError(f"unknown confidence metric {metric!r}")


def apply_temperature(logits: Sequence[float], tau: float) -> Distribution:
    """Temperature-scaled softmax over logits; tau=0 collapses to argmax.

    Ties at tau=0 resolve to the lowest index.  Non-finite logits and
    negative tau are rejected.
    """
    vals = [float(x) for x in logits]
    if not vals:
        raise ValueError("empty logit vector")
    for x in vals:
        if not math.isfinite(x):
            raise ValueError(f"non-finite logit {x!r}")
    if tau < 0.0:
        raise ValueError(f"temperature must be >= 0, got {tau}")
    if tau == 0.0:
        best = 0
        for k, x in enumerate(vals):
            if x > vals[best]:
                best = k
        out = [0.0] * len(vals)
        out[best] = 1.0
        return Distribution(out)
    m = max(vals)
    exps = [math.exp((x - m) / tau) for x in vals]
    return Distribution(exps)


def top_v_positions(scored: Mapping[int, float], v: int) -> list[int]:
    """The min(v, len) highest-scoring positions, ranked, ties to lower index."""
    if v < 1:
        raise ValueError(f"v must be >= 1, got {v}")
    ranked = sorted(scored, key=lambda pos: (-scored[pos], pos))
    return ranked[:v]


@dataclass(frozen=True)
class SequenceState:
    """Prompt plus a partially decoded response; None marks a masked slot.

    step is the remaining-step index t: total_steps at the start, 0 when the
    schedule is exhausted.
    """

    prompt: tuple[int, ...]
    response: tuple[int | None, ...]
    step: int

    @staticmethod
    def initial(prompt: Sequence[int], length: int, total_steps: int) -> "SequenceState":
        return SequenceState(tuple(prompt), (None,) * length, total_steps)

    def masked_positions(self) -> list[int]:
        return [i for i, x in enumerate(self.response) if x is None]

    def unmasked_items(self) -> list[tuple[int, int]]:
        return [(i, x) for i, x in enumerate(self.response) if x is not None]

    def with_decoded(self, tokens: Mapping[int, int]) -> "SequenceState":
        """New state with tokens written and the step index decremented."""
        resp = list(self.response)
        for i, tok in tokens.items():
            if resp[i] is not None:
                raise ValueError(f"position {i} already decoded")
            resp[i] = tok
        return SequenceState(self.prompt, tuple(resp), self.step - 1)


def validate_state(state: SequenceState, vocab: Vocabulary) -> None:
    """Reject out-of-alphabet tokens; masks are represented by None only."""
    for tok in state.prompt:
        if not 0 <= tok < vocab.size:
            raise ValueError(f"prompt token {tok} outside vocabulary of size {vocab.size}")
    for i, tok in enumerate(state.response):
        if tok is not None and not 0 <= tok < vocab.size:
            raise ValueError(f"response token {tok} at position {i} outside vocabulary")


def context_digest(seed: int, position: int, context: Iterable[tuple[int, int]]) -> int:
    """64-bit digest of (position, sorted unmasked (index, token) pairs).

    Used wherever a deterministic, platform-independent function of the
    visible context is needed (noise derivation, parameter-set selection).
    """
    h = mix64(0x5CCD, seed)
    h = mix64(h, position)
    for idx, tok in sorted(context):
        h = mix64(h, idx)
        h = mix64(h, tok)
    return h
