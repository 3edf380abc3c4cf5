"""Exactly solvable mask predictors with closed-form ground truth.

Four predictor families:

- MarkovOracle: first-order stationary chain over response positions; the
  conditional of a masked position given the nearest observed neighbors is
  exact (no approximation), so decode output can be compared to truth.
- FactorizedOracle: independent per-position distributions, context-free.
- NoisyOracle: wraps another oracle and mixes in deterministic per-context
  noise, modelling an imperfect predictor over a known data law.
- TemplateOracle: template/content/EOS-tail layout for plateau experiments.

Prediction math is pure Python floats with a pinned accumulation order (see
core module docstring): left-to-right sums, iterative matrix powers, no
transcendental functions.  External reference servers reproduce these ops
bit for bit.
"""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

from ccd.core import (
    Distribution,
    SequenceState,
    Vocabulary,
    context_digest,
    mix64,
    splitmix64,
    unit_float,
    validate_state,
)

ENUMERATION_GUARD = 10_000_000

NOISE_FLOOR = 1e-3  # keeps derived noise weights strictly positive


class EnumerationInfeasible(RuntimeError):
    """Raised when an exact computation would enumerate more than the guard."""


def _check_enumeration(size: int, length: int) -> None:
    if size**length > ENUMERATION_GUARD:
        raise EnumerationInfeasible(
            f"enumeration over {size}^{length} sequences exceeds guard {ENUMERATION_GUARD}"
        )


def prompt_digest(prompt: Sequence[int]) -> int:
    """Order-sensitive 64-bit digest of a prompt, mirrored by external servers."""
    h = mix64(0x9E, len(prompt))
    for tok in prompt:
        h = mix64(h, tok)
    return h


def _validate_dist_row(row: Sequence[float], what: str, size: int) -> tuple[float, ...]:
    if len(row) != size:
        raise ValueError(f"{what} must have {size} entries, got {len(row)}")
    total = 0.0
    for p in row:
        if not isinstance(p, (int, float)) or not math.isfinite(p) or p < 0:
            raise ValueError(f"{what} has invalid entry {p!r}")
        total += p
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"{what} must sum to 1 within 1e-9, got {total}")
    return tuple(float(p) for p in row)


class MarkovOracle:
    """Stationary first-order chain over response positions.

    The prompt does not enter the chain itself; it deterministically selects
    one (pi, A) pair from parameter_sets via prompt_digest.  Conditionals
    factor through the nearest observed neighbors:

      both sides:  p(v) ~ A^(i-l)[a][v] * A^(r-i)[v][b]
      left only:   p(v) ~ A^(i-l)[a][v]
      right only:  p(v) ~ (pi A^i)[v] * A^(r-i)[v][b]
      neither:     p(v) = (pi A^i)[v]
    """

    kind = "markov"

    def __init__(
        self,
        parameter_sets: Sequence[tuple[Sequence[float], Sequence[Sequence[float]]]],
        vocab: Vocabulary,
    ):
        if not parameter_sets:
            raise ValueError("markov oracle needs at least one (pi, A) parameter set")
        self.vocab = vocab
        self._sets: list[tuple[tuple[float, ...], tuple[tuple[float, ...], ...]]] = []
        for n, (pi, a) in enumerate(parameter_sets):
            pi_t = _validate_dist_row(pi, f"parameter_sets[{n}].pi", vocab.size)
            if len(a) != vocab.size:
                raise ValueError(f"parameter_sets[{n}].A must have {vocab.size} rows")
            a_t = tuple(
                _validate_dist_row(row, f"parameter_sets[{n}].A[{r}]", vocab.size)
                for r, row in enumerate(a)
            )
            self._sets.append((pi_t, a_t))
        # per parameter set: cached matrix powers and marginal rows
        self._powers: list[list[tuple[tuple[float, ...], ...]]] = [[] for _ in self._sets]
        self._marginals: list[list[tuple[float, ...]]] = [[] for _ in self._sets]

    @staticmethod
    def single(pi: Sequence[float], a: Sequence[Sequence[float]], vocab: Vocabulary) -> "MarkovOracle":
        return MarkovOracle([(pi, a)], vocab)

    def set_index(self, prompt: Sequence[int]) -> int:
        if len(self._sets) == 1:
            return 0
        return prompt_digest(prompt) % len(self._sets)

    def _power(self, set_idx: int, k: int) -> tuple[tuple[float, ...], ...]:
        """A^k with A^0 = I, built iteratively with left-to-right accumulation."""
        cache = self._powers[set_idx]
        size = self.vocab.size
        if not cache:
            ident = tuple(
                tuple(1.0 if i == j else 0.0 for j in range(size)) for i in range(size)
            )
            cache.append(ident)
        a = self._sets[set_idx][1]
        while len(cache) <= k:
            prev = cache[-1]
            nxt = []
            for i in range(size):
                row = []
                for j in range(size):
                    acc = 0.0
                    for m in range(size):
                        acc += prev[i][m] * a[m][j]
                    row.append(acc)
                nxt.append(tuple(row))
            cache.append(tuple(nxt))
        return cache[k]

    def _marginal(self, set_idx: int, i: int) -> tuple[float, ...]:
        """Row pi A^i, built iteratively."""
        cache = self._marginals[set_idx]
        if not cache:
            cache.append(self._sets[set_idx][0])
        a = self._sets[set_idx][1]
        size = self.vocab.size
        while len(cache) <= i:
            prev = cache[-1]
            nxt = []
            for j in range(size):
                acc = 0.0
                for m in range(size):
                    acc += prev[m] * a[m][j]
                nxt.append(acc)
            cache.append(tuple(nxt))
        return cache[i]

    def predict(self, state: SequenceState) -> dict[int, Distribution]:
        validate_state(state, self.vocab)
        set_idx = self.set_index(state.prompt)
        out: dict[int, Distribution] = {}
        response = state.response
        n = len(response)
        for i in range(n):
            if response[i] is not None:
                continue
            left = right = -1
            for j in range(i - 1, -1, -1):
                if response[j] is not None:
                    left = j
                    break
            for j in range(i + 1, n):
                if response[j] is not None:
                    right = j
                    break
            vals: list[float] = []
            if left >= 0:
                p_left = self._power(set_idx, i - left)
                a_tok = response[left]
                base = [p_left[a_tok][v] for v in range(self.vocab.size)]
            else:
                base = list(self._marginal(set_idx, i))
            if right >= 0:
                p_right = self._power(set_idx, right - i)
                b_tok = response[right]
                vals = [base[v] * p_right[v][b_tok] for v in range(self.vocab.size)]
            else:
                vals = base
            out[i] = Distribution(vals)
        return out

    def data_marginal(self, i: int, prompt: Sequence[int]) -> Distribution:
        return Distribution(self._marginal(self.set_index(prompt), i))

    def joint_prob(self, x: Sequence[int], prompt: Sequence[int]) -> float:
        pi, a = self._sets[self.set_index(prompt)]
        p = pi[x[0]]
        for k in range(1, len(x)):
            p *= a[x[k - 1]][x[k]]
        return p

    def to_json(self) -> dict:
        out: dict = {"type": "markov", "size": self.vocab.size,
                     "mask_id": self.vocab.mask_id, "eos_id": self.vocab.eos_id}
        if len(self._sets) == 1:
            out["pi"] = list(self._sets[0][0])
            out["A"] = [list(r) for r in self._sets[0][1]]
        else:
            out["parameter_sets"] = [
                {"pi": list(pi), "A": [list(r) for r in a]} for pi, a in self._sets
            ]
        return out


def symmetric_chain(size: int, stay: float, vocab: Vocabulary | None = None) -> MarkovOracle:
    """Uniform-start chain that keeps its token with probability stay."""
    if not 0.0 <= stay <= 1.0:
        raise ValueError(f"stay probability must be in [0, 1], got {stay}")
    vocab = vocab or Vocabulary(size)
    off = (1.0 - stay) / (size - 1) if size > 1 else 0.0
    a = [[stay if i == j else off for j in range(size)] for i in range(size)]
    pi = [1.0 / size] * size
    if size == 1:
        a = [[1.0]]
        pi = [1.0]
    return MarkovOracle.single(pi, a, vocab)


class FactorizedOracle:
    """Independent per-position distributions; context never matters."""

    kind = "factorized"

    def __init__(self, per_position: Sequence[Sequence[float]], vocab: Vocabulary):
        if not per_position:
            raise ValueError("factorized oracle needs at least one position")
        self.vocab = vocab
        self.per_position = tuple(
            Distribution(_validate_dist_row(row, f"per_position[{i}]", vocab.size))
            for i, row in enumerate(per_position)
        )

    @property
    def length(self) -> int:
        return len(self.per_position)

    def predict(self, state: SequenceState) -> dict[int, Distribution]:
        validate_state(state, self.vocab)
        if len(state.response) != self.length:
            raise ValueError(
                f"factorized oracle covers {self.length} positions, state has {len(state.response)}"
            )
        return {i: self.per_position[i] for i in state.masked_positions()}

    def data_marginal(self, i: int, prompt: Sequence[int]) -> Distribution:
        return self.per_position[i]

    def joint_prob(self, x: Sequence[int], prompt: Sequence[int]) -> float:
        p = 1.0
        for i, tok in enumerate(x):
            p *= self.per_position[i][tok]
        return p

    def to_json(self) -> dict:
        return {
            "type": "factorized",
            "size": self.vocab.size,
            "mask_id": self.vocab.mask_id,
            "eos_id": self.vocab.eos_id,
            "per_position": [list(d.probs) for d in self.per_position],
        }


class NoisyOracle:
    """Deterministic per-context corruption of an inner predictor.

    predict = (1-eta) * inner + eta * q where q is derived from a 64-bit
    digest of (seed, position, unmasked response slots).  The data law (joint,
    marginals for reporting, MI) remains the inner oracle's; exact_marginal
    is the context-averaged limit of the corrupted predictor, which the
    sliding-window average converges to.
    """

    kind = "noisy"

    def __init__(self, inner, eta: float, seed: int):
        if not 0.0 <= eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {eta}")
        self.inner = inner
        self.eta = eta
        self.seed = seed
        self.vocab: Vocabulary = inner.vocab

    def noise_dist(self, position: int, context: Iterable[tuple[int, int]]) -> Distribution:
        h = context_digest(self.seed, position, context)
        weights = []
        s = h
        for _ in range(self.vocab.size):
            s, word = splitmix64(s)
            weights.append(unit_float(word) + NOISE_FLOOR)
        return Distribution(weights)

    def predict(self, state: SequenceState) -> dict[int, Distribution]:
        inner_dists = self.inner.predict(state)
        if self.eta == 0.0:
            return inner_dists  # degenerate mixture, bit-identical to inner
        pairs = state.unmasked_items()
        out: dict[int, Distribution] = {}
        one_minus = 1.0 - self.eta
        for i, dist in inner_dists.items():
            q = self.noise_dist(i, pairs)
            out[i] = Distribution(
                [one_minus * dist[v] + self.eta * q[v] for v in range(self.vocab.size)]
            )
        return out

    def joint_prob(self, x: Sequence[int], prompt: Sequence[int]) -> float:
        return self.inner.joint_prob(x, prompt)

    def to_json(self) -> dict:
        return {"type": "noisy", "eta": self.eta, "seed": self.seed, "inner": self.inner.to_json()}


TEMPLATE_MASS = 0.995
EOS_MASS_PRE = 0.6
EOS_MASS_POST = 0.995


class TemplateOracle:
    """Template/content layout with an EOS tail past true_length.

    layout has exactly true_length entries: an int fixes a template token at
    that slot, the string "content" delegates to the factorized base.  Tail
    positions (>= true_length) predict EOS with mass eos_mass_pre until every
    content position is unmasked, then eos_mass_post (>= 0.99).  The data law
    is the product measure: fixed tokens, base distributions at content
    slots, EOS at the tail.
    """

    kind = "template"

    def __init__(
        self,
        layout: Sequence[int | str],
        base: FactorizedOracle,
        vocab: Vocabulary,
        template_mass: float = TEMPLATE_MASS,
        eos_mass_pre: float = EOS_MASS_PRE,
        eos_mass_post: float = EOS_MASS_POST,
    ):
        if not isinstance(base, FactorizedOracle):
            raise ValueError("template base must be a factorized oracle")
        if base.vocab.size != vocab.size:
            raise ValueError("template base vocabulary size mismatch")
        if len(layout) != base.length:
            raise ValueError(
                f"layout has {len(layout)} entries but base covers {base.length} positions"
            )
        if not 0.99 <= template_mass < 1.0 or not 0.99 <= eos_mass_post < 1.0:
            raise ValueError("template_mass and eos_mass_post must be in [0.99, 1)")
        if not 0.0 < eos_mass_pre < 1.0:
            raise ValueError("eos_mass_pre must be in (0, 1)")
        if vocab.size < 2:
            raise ValueError("template oracle needs vocabulary size >= 2")
        self.vocab = vocab
        self.base = base
        self.layout: tuple[int | str, ...] = tuple(layout)
        self.true_length = len(layout)
        self.template_mass = template_mass
        self.eos_mass_pre = eos_mass_pre
        self.eos_mass_post = eos_mass_post
        self.content_positions: tuple[int, ...] = tuple(
            i for i, ent in enumerate(layout) if ent == "content"
        )
        for i, ent in enumerate(layout):
            if ent == "content":
                continue
            if not isinstance(ent, int) or not 0 <= ent < vocab.size:
                raise ValueError(f'layout[{i}] must be "content" or a token id, got {ent!r}')

    def _peaked(self, token: int, mass: float) -> Distribution:
        rest = (1.0 - mass) / (self.vocab.size - 1)
        return Distribution(
            [mass if v == token else rest for v in range(self.vocab.size)]
        )

    def gate_open(self, state: SequenceState) -> bool:
        resp = state.response
        return all(resp[i] is not None for i in self.content_positions)

    def predict(self, state: SequenceState) -> dict[int, Distribution]:
        validate_state(state, self.vocab)
        if len(state.response) < self.true_length:
            raise ValueError(
                f"state length {len(state.response)} shorter than true_length {self.true_length}"
            )
        gate = self.gate_open(state)
        eos_mass = self.eos_mass_post if gate else self.eos_mass_pre
        out: dict[int, Distribution] = {}
        for i in state.masked_positions():
            if i >= self.true_length:
                out[i] = self._peaked(self.vocab.eos_id, eos_mass)
            elif self.layout[i] == "content":
                out[i] = self.base.per_position[i]
            else:
                out[i] = self._peaked(self.layout[i], self.template_mass)
        return out

    def data_marginal(self, i: int, prompt: Sequence[int]) -> Distribution:
        if i >= self.true_length:
            one_hot = [0.0] * self.vocab.size
            one_hot[self.vocab.eos_id] = 1.0
            return Distribution(one_hot)
        if self.layout[i] == "content":
            return self.base.per_position[i]
        one_hot = [0.0] * self.vocab.size
        one_hot[self.layout[i]] = 1.0
        return Distribution(one_hot)

    def joint_prob(self, x: Sequence[int], prompt: Sequence[int]) -> float:
        p = 1.0
        for i, tok in enumerate(x):
            p *= self.data_marginal(i, prompt)[tok]
        return p

    def to_json(self) -> dict:
        return {
            "type": "template",
            "size": self.vocab.size,
            "mask_id": self.vocab.mask_id,
            "eos_id": self.vocab.eos_id,
            "layout": list(self.layout),
            "true_length": self.true_length,
            "template_mass": self.template_mass,
            "eos_mass_pre": self.eos_mass_pre,
            "eos_mass_post": self.eos_mass_post,
            "base": self.base.to_json(),
        }


Oracle = MarkovOracle | FactorizedOracle | NoisyOracle | TemplateOracle


def intrinsic_length(oracle: Oracle) -> int | None:
    """Response length the oracle pins down, if any (chains accept any N)."""
    if isinstance(oracle, FactorizedOracle):
        return oracle.length
    if isinstance(oracle, TemplateOracle):
        return None  # any N >= true_length; callers pass an explicit length
    if isinstance(oracle, NoisyOracle):
        return intrinsic_length(oracle.inner)
    return None


def joint_prob(oracle: Oracle, x: Sequence[int], prompt: Sequence[int] = ()) -> float:
    """Ground-truth probability of a full response under the oracle's data law."""
    for tok in x:
        if not 0 <= tok < oracle.vocab.size:
            raise ValueError(f"token {tok} outside vocabulary")
    if len(x) == 0:
        raise ValueError("empty sequence")
    return oracle.joint_prob(x, prompt)


def enumerate_joint(
    oracle: Oracle, length: int, prompt: Sequence[int] = ()
) -> dict[tuple[int, ...], float]:
    """Full table of the data law over |X|^length sequences (guarded)."""
    size = oracle.vocab.size
    _check_enumeration(size, length)
    table: dict[tuple[int, ...], float] = {}
    seq = [0] * length
    while True:
        key = tuple(seq)
        table[key] = joint_prob(oracle, key, prompt)
        k = length - 1
        while k >= 0 and seq[k] == size - 1:
            seq[k] = 0
            k -= 1
        if k < 0:
            break
        seq[k] += 1
    return table


def _resolve_length(oracle: Oracle, length: int | None, op: str) -> int:
    fixed = intrinsic_length(oracle)
    if fixed is not None:
        if length is not None and length != fixed:
            raise ValueError(f"{op}: oracle fixes length {fixed}, got {length}")
        return fixed
    if length is None:
        raise ValueError(f"{op}: oracle does not fix a response length; pass length=")
    return length


def exact_marginal(
    oracle: Oracle, i: int, prompt: Sequence[int] = (), length: int | None = None
) -> Distribution:
    """Exact limit of context-averaged prediction at position i.

    For self-consistent oracles this is the data-law marginal p(x_i | s),
    computed in closed form.  For NoisyOracle no coherent joint exists, so it
    is E over full contexts drawn from the inner data law of the corrupted
    prediction at i — the quantity a context-averaging decoder converges to.
    """
    if i < 0:
        raise ValueError(f"position must be >= 0, got {i}")
    if isinstance(oracle, NoisyOracle):
        if oracle.eta == 0.0:
            return exact_marginal(oracle.inner, i, prompt, length)
        n = _resolve_length(oracle, length, "exact_marginal")
        if not i < n:
            raise ValueError(f"position {i} outside length {n}")
        size = oracle.vocab.size
        _check_enumeration(size, n)
        table = enumerate_joint(oracle.inner, n, prompt)
        # weight of each context = joint marginalized over position i
        ctx_weight: dict[tuple[int, ...], float] = {}
        for seq, p in table.items():
            ctx = seq[:i] + (None,) + seq[i + 1 :]
            ctx_weight[ctx] = ctx_weight.get(ctx, 0.0) + p
        acc = [0.0] * size
        for ctx, w in sorted(ctx_weight.items(), key=lambda kv: kv[0][: i] + kv[0][i + 1 :]):
            if w == 0.0:
                continue
            state = SequenceState(tuple(prompt), ctx, 1)
            dist = oracle.predict(state)[i]
            for v in range(size):
                acc[v] += w * dist[v]
        return Distribution(acc)
    fixed = intrinsic_length(oracle)
    if isinstance(oracle, TemplateOracle):
        n = length if length is not None else oracle.true_length
        if n < oracle.true_length:
            raise ValueError("length shorter than template true_length")
        if not i < n:
            raise ValueError(f"position {i} outside length {n}")
    elif fixed is not None and not i < fixed:
        raise ValueError(f"position {i} outside length {fixed}")
    return oracle.data_marginal(i, prompt)


def mc_context_average(
    oracle: Oracle,
    i: int,
    prompt: Sequence[int],
    length: int,
    sample_counts: Sequence[int],
    seed: int,
) -> list[Distribution]:
    """Prefix Monte Carlo estimates of exact_marginal over growing K.

    Draws full contexts from the data law with a seeded generator and returns
    the running average after each K in sample_counts (one shared stream, so
    estimates are nested).
    """
    import random

    counts = sorted(sample_counts)
    if not counts or counts[0] < 1:
        raise ValueError("sample_counts must be positive")
    rng = random.Random(seed)
    size = oracle.vocab.size
    acc = [0.0] * size
    results: list[Distribution] = []
    done = 0
    for target in counts:
        while done < target:
            seq = sample_sequence(oracle, length, prompt, rng)
            ctx = list(seq)
            ctx[i] = None
            state = SequenceState(tuple(prompt), tuple(ctx), 1)
            dist = oracle.predict(state)[i]
            for v in range(size):
                acc[v] += dist[v]
            done += 1
        results.append(Distribution([a / done for a in acc]))
    return results


def sample_sequence(oracle: Oracle, length: int, prompt: Sequence[int], rng) -> tuple[int, ...]:
    """Draw one full response from the oracle's data law."""
    if isinstance(oracle, NoisyOracle):
        return sample_sequence(oracle.inner, length, prompt, rng)
    if isinstance(oracle, MarkovOracle):
        pi, a = oracle._sets[oracle.set_index(prompt)]
        out = [_draw(pi, rng)]
        for _ in range(1, length):
            out.append(_draw(a[out[-1]], rng))
        return tuple(out)
    out = []
    for i in range(length):
        out.append(_draw(oracle.data_marginal(i, prompt).probs, rng))
    return tuple(out)


def _draw(probs: Sequence[float], rng) -> int:
    r = rng.random()
    acc = 0.0
    for v, p in enumerate(probs):
        acc += p
        if r < acc:
            return v
    return len(probs) - 1


def mutual_information_token_rest(
    oracle: Oracle, i: int, prompt: Sequence[int] = (), length: int | None = None
) -> float:
    """I(x_i ; x_rest | s) in nats under the data law, by exact enumeration.

    Product-measure oracles short-circuit to 0.  NoisyOracle delegates to its
    inner data law (noise corrupts predictions, not the distribution of
    sequences).
    """
    if isinstance(oracle, (FactorizedOracle, TemplateOracle)):
        if isinstance(oracle, TemplateOracle):
            n = length if length is not None else oracle.true_length
        else:
            n = _resolve_length(oracle, length, "mutual_information")
        if not 0 <= i < n:
            raise ValueError(f"position {i} outside length {n}")
        return 0.0
    if isinstance(oracle, NoisyOracle):
        return mutual_information_token_rest(oracle.inner, i, prompt, length)
    n = _resolve_length(oracle, length, "mutual_information")
    if not 0 <= i < n:
        raise ValueError(f"position {i} outside length {n}")
    table = enumerate_joint(oracle, n, prompt)
    p_i: dict[int, float] = {}
    p_rest: dict[tuple[int, ...], float] = {}
    for seq, p in table.items():
        p_i[seq[i]] = p_i.get(seq[i], 0.0) + p
        rest = seq[:i] + seq[i + 1 :]
        p_rest[rest] = p_rest.get(rest, 0.0) + p
    mi = 0.0
    for seq, p in table.items():
        if p <= 0.0:
            continue
        rest = seq[:i] + seq[i + 1 :]
        mi += p * math.log(p / (p_i[seq[i]] * p_rest[rest]))
    return max(mi, 0.0)


# ---------------------------------------------------------------------------
# JSON (de)serialization — the file format shared with external servers.


def oracle_from_json(spec: Mapping, where: str = "oracle") -> Oracle:
    """Build an oracle from its JSON object form; errors name the faulty field."""
    if not isinstance(spec, Mapping):
        raise ValueError(f"{where}: expected an object, got {type(spec).__name__}")
    kind = spec.get("type")
    if kind == "noisy":
        for field in ("eta", "seed", "inner"):
            if field not in spec:
                raise ValueError(f"{where}.{field}: required for noisy oracles")
        inner = oracle_from_json(spec["inner"], f"{where}.inner")
        if not isinstance(spec["seed"], int):
            raise ValueError(f"{where}.seed: must be an integer")
        try:
            return NoisyOracle(inner, float(spec["eta"]), spec["seed"])
        except ValueError as e:
            raise ValueError(f"{where}: {e}") from None
    size = spec.get("size")
    if not isinstance(size, int) or size < 1:
        raise ValueError(f"{where}.size: must be a positive integer, got {size!r}")
    try:
        vocab = Vocabulary(size, spec.get("mask_id", -1), spec.get("eos_id", -1))
    except ValueError as e:
        raise ValueError(f"{where}: {e}") from None
    try:
        if kind == "symmetric-chain":
            # input-only convenience: serializes back out as a plain markov
            if "stay" not in spec:
                raise ValueError("needs stay")
            return symmetric_chain(size, float(spec["stay"]), vocab)
        if kind == "markov":
            if "parameter_sets" in spec:
                sets = [(ps.get("pi"), ps.get("A")) for ps in spec["parameter_sets"]]
            elif "pi" in spec and "A" in spec:
                sets = [(spec["pi"], spec["A"])]
            else:
                raise ValueError("needs pi and A (or parameter_sets)")
            return MarkovOracle(sets, vocab)
        if kind == "factorized":
            if "per_position" not in spec:
                raise ValueError("needs per_position")
            return FactorizedOracle(spec["per_position"], vocab)
        if kind == "template":
            for field in ("layout", "true_length", "base"):
                if field not in spec:
                    raise ValueError(f"needs {field}")
            base = oracle_from_json(spec["base"], f"{where}.base")
            if not isinstance(base, FactorizedOracle):
                raise ValueError("base must be a factorized oracle")
            layout = list(spec["layout"])
            if spec["true_length"] != len(spec["layout"]):
                raise ValueError(
                    f"true_length {spec['true_length']} != layout length {len(spec['layout'])}"
                )
            return TemplateOracle(
                layout,
                base,
                vocab,
                template_mass=spec.get("template_mass", TEMPLATE_MASS),
                eos_mass_pre=spec.get("eos_mass_pre", EOS_MASS_PRE),
                eos_mass_post=spec.get("eos_mass_post", EOS_MASS_POST),
            )
    except ValueError as e:
        msg = str(e)
        raise ValueError(msg if msg.startswith(where) else f"{where}: {msg}") from None
    raise ValueError(
        f"{where}.type: must be one of markov|symmetric-chain|factorized|noisy|template, got {kind!r}"
    )


def oracle_to_json(oracle: Oracle) -> dict:
    return oracle.to_json()
