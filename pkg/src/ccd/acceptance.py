"""End-to-end acceptance checks, shared by `ccd verify` and the test suite.

Each check is a function that raises on failure (with a message pointing at
the violated claim) and returns a one-line detail string on success.  Checks
carry a wall-clock budget; exceeding it fails the check even if the claims
hold.  The remote-server transparency check is optional because it needs the
separately built reference server; everything else runs on this package
alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import json
import math
import os
import random
import shlex
import shutil
import socket
import statistics
import subprocess
import tempfile
import time

from .buffer import HistoryBuffer
from .core import Distribution, SequenceState, Vocabulary, derive_seed, entropy
from .metrics import (
    chain_rule_decomposition,
    empirical_sampling_kl,
    oracle_marginals,
    ter_bits,
)
from .oracles import (
    FactorizedOracle,
    NoisyOracle,
    TemplateOracle,
    exact_marginal,
    mc_context_average,
    oracle_from_json,
    symmetric_chain,
)
from .protocol import RemotePredictor, serve_check
from .sampler import (
    MODE_BASELINE,
    MODE_CCD,
    MODE_CCD_DS,
    OraclePredictor,
    SamplerConfig,
    decode,
    parse_trace,
    trace_objects,
    trace_text,
    validate_trace_legality,
)

LN2 = math.log(2.0)


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    seconds: float
    detail: str


def _fresh(n: int, t: int, prompt=()) -> SequenceState:
    return SequenceState.initial(prompt, n, t)


# --- primary checks -----------------------------------------------------------

def check_baseline_reduction() -> str:
    """With history disabled, both gated modes must replay the baseline
    exactly: same positions, same tokens, same step count, run for run."""
    oracle = symmetric_chain(4, 0.8)
    predictor = OraclePredictor(oracle)
    pairs = 0
    for mode in (MODE_CCD, MODE_CCD_DS):
        for seed in range(50):
            base_cfg = SamplerConfig(total_steps=8, mode=MODE_BASELINE, tau=0.7, seed=seed)
            red_cfg = SamplerConfig(total_steps=8, mode=mode, tau=0.7, seed=seed,
                                    disable_history=True)
            base = decode(_fresh(8, 8), predictor, base_cfg)
            red = decode(_fresh(8, 8), predictor, red_cfg)
            assert red.final == base.final, (
                f"{mode} seed {seed}: final {red.final} != baseline {base.final}")
            assert red.steps_taken == base.steps_taken, (
                f"{mode} seed {seed}: {red.steps_taken} steps != {base.steps_taken}")
            for k, (a, b) in enumerate(zip(base.steps, red.steps)):
                assert a.selected == b.selected and a.tokens == b.tokens, (
                    f"{mode} seed {seed} step {k}: selection diverged")
            pairs += 1
    return f"{pairs} seeded pairs reduced to the baseline exactly"


def check_chain_rule_identity() -> str:
    """H(marginal) = H(token | rest) + I(token ; rest), with the three terms
    computed by unrelated routes, must close to 1e-9."""
    worst = 0.0
    cases = 0
    for size, stay in ((2, 0.6), (2, 0.9), (3, 0.6), (3, 0.9)):
        oracle = symmetric_chain(size, stay)
        for i in range(4):
            dec = chain_rule_decomposition(oracle, i, length=4)
            worst = max(worst, abs(dec.residual))
            assert abs(dec.residual) < 1e-9, (
                f"size {size} stay {stay} position {i}: residual {dec.residual}")
            cases += 1
    flat = FactorizedOracle([[0.7, 0.2, 0.1], [0.3, 0.3, 0.4]], Vocabulary(3))
    for i in range(2):
        dec = chain_rule_decomposition(flat, i)
        assert dec.mutual_information == 0.0
        assert abs(dec.residual) < 1e-9
        cases += 1
    return f"{cases} decompositions closed; worst residual {worst:.2e}"


def check_marginalization_convergence() -> str:
    """Monte Carlo context averages of a corrupted predictor must close in on
    the exact context-averaged limit as the sample count grows."""
    inner = FactorizedOracle(
        [[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7], [0.4, 0.4, 0.2]],
        Vocabulary(3))
    noisy = NoisyOracle(inner, eta=0.3, seed=5)
    position = 1
    exact = exact_marginal(noisy, position)
    counts = (4, 16, 64, 256)
    per_count: list[list[float]] = [[] for _ in counts]
    for s in range(20):
        estimates = mc_context_average(noisy, position, (), 4, counts,
                                       seed=derive_seed(0, f"convergence-{s}"))
        for k, est in enumerate(estimates):
            l1 = sum(abs(a - b) for a, b in zip(est.probs, exact.probs))
            per_count[k].append(l1)
    medians = [statistics.median(errors) for errors in per_count]
    for a, b in zip(medians, medians[1:]):
        assert b <= a, f"median error rose along {counts}: {medians}"
    assert medians[-1] <= 0.5 * medians[0], (
        f"64x more samples only took the median from {medians[0]:.4f} to {medians[-1]:.4f}")
    rendered = ", ".join(f"K={k}: {m:.4f}" for k, m in zip(counts, medians))
    return f"median L1 distance fell monotonically ({rendered})"


def check_buffer_memory_bound() -> str:
    """The history window must never hold more than d*v distributions, under
    an adversarial mix of pushes, purges, and queries."""
    rng = random.Random(0)
    ops = 0
    for d in range(1, 5):
        for v in range(1, 9):
            buf = HistoryBuffer(d, v)
            alive = list(range(64))
            for _ in range(320):
                action = rng.random()
                if action < 0.5:
                    chosen = rng.sample(alive, k=min(len(alive), rng.randint(0, v)))
                    buf.push_iteration({
                        i: Distribution([rng.random() + 0.05 for _ in range(4)])
                        for i in chosen})
                elif action < 0.8 and alive:
                    gone = rng.sample(alive, k=rng.randint(1, min(4, len(alive))))
                    buf.purge(gone)
                else:
                    buf.intersection_positions()
                ops += 1
                held = buf.stored_count()
                assert held <= d * v, f"(d={d}, v={v}): {held} stored after {ops} ops"
    assert ops >= 10_000, f"only {ops} operations exercised"
    return f"{ops} operations across d in 1..4, v in 1..8 never exceeded d*v"


def check_sampling_error_tracks_mi() -> str:
    """Parallel decoding pays more divergence the more the tokens share
    information; fully sequential decoding escapes the penalty."""
    stays = (0.5, 0.7, 0.9, 0.99)
    two_step = SamplerConfig(total_steps=2, mode=MODE_BASELINE, tau=1.0)
    kls = []
    for stay in stays:
        oracle = symmetric_chain(2, stay)
        kls.append(empirical_sampling_kl(oracle, two_step, 4, trials=20000, seed=11))
    pairs = list(zip(stays, kls))
    for (s1, k1), (s2, k2) in zip(pairs, pairs[1:]):
        assert k2 >= k1, (
            f"KL fell from {k1:.4f} to {k2:.4f} as stay rose {s1} -> {s2}")
    tight = symmetric_chain(2, 0.99)
    sequential = empirical_sampling_kl(
        tight, SamplerConfig(total_steps=4, mode=MODE_BASELINE, tau=1.0),
        4, trials=20000, seed=13)
    parallel = empirical_sampling_kl(
        tight, SamplerConfig(total_steps=1, mode=MODE_BASELINE, tau=1.0),
        4, trials=20000, seed=13)
    assert sequential <= parallel, (
        f"sequential KL {sequential:.4f} above one-shot KL {parallel:.4f}")
    rendered = ", ".join(f"{s}: {k:.4f}" for s, k in zip(stays, kls))
    return (f"KL rose with stay ({rendered}); one-shot {parallel:.4f} vs "
            f"sequential {sequential:.4f} at stay=0.99")


def _plateau_oracle() -> tuple[TemplateOracle, list[int | str], FactorizedOracle]:
    vocab = Vocabulary(4)
    true_length = 64
    layout: list[int | str] = []
    rows = []
    patterns = ([0.7, 0.2, 0.05, 0.05], [0.1, 0.75, 0.1, 0.05], [0.15, 0.1, 0.7, 0.05])
    for i in range(true_length):
        rows.append(patterns[i % 3])
        layout.append("content" if i % 2 else (i // 2) % 3)
    base = FactorizedOracle(rows, vocab)
    return TemplateOracle(layout, base, vocab), layout, base


def check_plateau_speedup() -> str:
    """On a half-templated task with a long EOS tail, adaptive gating must
    finish in at most half the baseline's steps without corrupting content."""
    oracle, layout, base = _plateau_oracle()
    n, t = 128, 128
    predictor = OraclePredictor(oracle)
    baseline = decode(_fresh(n, t), predictor,
                      SamplerConfig(total_steps=t, mode=MODE_BASELINE))
    adaptive = decode(_fresh(n, t), predictor,
                      SamplerConfig(total_steps=t, mode=MODE_CCD_DS, v=4, d=3))
    assert baseline.steps_taken == t, f"baseline took {baseline.steps_taken} steps, not {t}"
    assert adaptive.steps_taken <= baseline.steps_taken // 2, (
        f"adaptive took {adaptive.steps_taken} steps, above half of {baseline.steps_taken}")
    for i, entry in enumerate(layout):
        want = entry if isinstance(entry, int) else base.per_position[i].argmax()
        assert adaptive.final[i] == want, (
            f"position {i}: decoded {adaptive.final[i]}, true layout says {want}")
    eos = oracle.vocab.eos_id
    for i in range(len(layout), n):
        assert adaptive.final[i] == eos, f"tail position {i} decoded {adaptive.final[i]}"
    problems = validate_trace_legality(parse_trace(trace_objects(adaptive)))
    assert problems == [], f"adaptive trace is illegal: {problems[:3]}"
    ratio = adaptive.steps_taken / baseline.steps_taken
    return (f"{adaptive.steps_taken} adaptive steps vs {baseline.steps_taken} baseline "
            f"({ratio:.2f}x), content and tail exact")


def check_budget_legality() -> str:
    """Replaying recorded traces against the decode rules must find no
    violations, and a tampered trace must be caught."""
    oracle = symmetric_chain(4, 0.8)
    predictor = OraclePredictor(oracle)
    configs = [
        SamplerConfig(total_steps=8, mode=MODE_BASELINE, seed=1),
        SamplerConfig(total_steps=8, mode=MODE_CCD, seed=2, tau=0.5),
        SamplerConfig(total_steps=8, mode=MODE_CCD_DS, seed=3),
        SamplerConfig(total_steps=4, mode=MODE_CCD_DS, seed=4),
        SamplerConfig(total_steps=6, mode=MODE_CCD, seed=5, block_size=3),
        SamplerConfig(total_steps=2, mode=MODE_BASELINE, seed=6,
                      budget_schedule=((2, 1), (1, 1))),
    ]
    checked = 0
    tmpl_oracle, _, _ = _plateau_oracle()
    runs = [(predictor, 8, cfg) for cfg in configs]
    runs.append((OraclePredictor(tmpl_oracle), 96,
                 SamplerConfig(total_steps=96, mode=MODE_CCD_DS)))
    forced_seen = extras_seen = False
    for pred, n, cfg in runs:
        result = decode(_fresh(n, cfg.total_steps), pred, cfg)
        trace = parse_trace(trace_objects(result))
        problems = validate_trace_legality(trace)
        assert problems == [], f"{cfg.mode} run reported violations: {problems[:3]}"
        forced_seen = forced_seen or any(s.forced for s in trace.steps)
        extras_seen = extras_seen or any(s.extra for s in trace.steps)
        checked += 1
    assert forced_seen, "battery never exercised a forced closing step"
    assert extras_seen, "battery never exercised over-budget extras"
    result = decode(_fresh(96, 96), OraclePredictor(tmpl_oracle),
                    SamplerConfig(total_steps=96, mode=MODE_CCD_DS))
    objects = trace_objects(result)
    tampered = False
    for obj in objects:
        if obj.get("kind") == "step" and obj["extra"]:
            obj["stable"] = [False] * len(obj["gate"])
            tampered = True
            break
    assert tampered, "no over-budget step available to tamper with"
    problems = validate_trace_legality(parse_trace(objects))
    assert problems, "tampered evidence slipped past the validator"
    return f"{checked} traces replayed clean; tampered evidence was caught"


def check_ter_exactness() -> str:
    """Committing exactly the marginals scores exactly the mean marginal
    entropy, and any deviation strictly raises the score."""
    flat = FactorizedOracle(
        [[0.7, 0.2, 0.1], [0.25, 0.5, 0.25], [0.1, 0.1, 0.8]], Vocabulary(3))
    marginals = oracle_marginals(flat)
    want_bits = sum(entropy(m) for m in marginals.values()) / (len(marginals) * LN2)
    got = ter_bits(marginals, marginals)
    assert abs(got - want_bits) < 1e-9, f"TER {got!r} != mean marginal entropy {want_bits!r}"
    chain = symmetric_chain(4, 0.8)
    chain_marginals = oracle_marginals(chain, length=3)
    got_chain = ter_bits(chain_marginals, chain_marginals)
    assert abs(got_chain - 2.0) < 1e-9, (
        f"uniform marginals of a 4-symbol chain must score 2 bits, got {got_chain!r}")
    bumps = 0
    for i in marginals:
        for delta in (0.05, -0.05):
            probs = list(marginals[i].probs)
            probs[0] += delta
            probs[1] -= delta
            perturbed = dict(marginals)
            perturbed[i] = Distribution(probs)
            assert ter_bits(marginals, perturbed) > got + 1e-12, (
                f"perturbing position {i} by {delta} did not raise TER")
            bumps += 1
    return f"exact at {got:.6f} bits; all {bumps} perturbations strictly increased it"


# --- secondary check ----------------------------------------------------------

def _repo_root() -> str:
    return os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def refserver_entry() -> str | None:
    """Path to the built reference server, or None when it is not built."""
    path = os.path.join(_repo_root(), "refserver", "dist", "server.js")
    return path if os.path.exists(path) else None


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def check_protocol_transparency() -> str:
    """Decoding through the reference server, over both transports, must be
    byte-identical to in-process decoding, and the server must pass the
    compliance probes."""
    entry = refserver_entry()
    assert entry is not None, (
        "reference server is not built; run `npm install && npm run build` in refserver/")
    node = shutil.which("node")
    assert node is not None, "node is not on PATH"
    spec = symmetric_chain(4, 0.85).to_json()
    with tempfile.TemporaryDirectory() as tmp:
        oracle_path = os.path.join(tmp, "oracle.json")
        text = json.dumps(spec)
        with open(oracle_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        # parity is judged against a local twin built from the same bytes the
        # server reads; stored rows renormalize once on load, so an in-memory
        # original is not the same oracle as its file round trip
        oracle = oracle_from_json(json.loads(text))
        exec_transport = (f"exec:{shlex.quote(node)} {shlex.quote(entry)} "
                          f"--mode oracle --oracle {shlex.quote(oracle_path)}")

        results = serve_check(exec_transport, oracle=oracle, length=6, timeout=15)
        failed = [r for r in results if not r.ok]
        assert not failed, "; ".join(f"{r.name}: {r.detail}" for r in failed)

        matched = 0
        for seed in range(10):
            cfg = SamplerConfig(total_steps=6, mode=MODE_CCD_DS, tau=0.6, seed=seed)
            local = decode(_fresh(6, 6), OraclePredictor(oracle), cfg)
            with RemotePredictor(exec_transport, timeout=15) as remote:
                over_wire = decode(_fresh(6, 6), remote, cfg)
            assert trace_text(over_wire) == trace_text(local), (
                f"exec transport diverged at seed {seed}")
            matched += 1

        port = _free_port()
        server = subprocess.Popen(
            [node, entry, "--mode", "oracle", "--oracle", oracle_path,
             "--transport", "tcp", "--port", str(port)],
            stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        try:
            deadline = time.monotonic() + 10
            while time.monotonic() < deadline:
                try:
                    with socket.create_connection(("127.0.0.1", port), timeout=0.5):
                        break
                except OSError:
                    time.sleep(0.05)
            else:
                raise AssertionError("tcp server never started listening")
            tcp_transport = f"tcp:127.0.0.1:{port}"
            for seed in range(10):
                cfg = SamplerConfig(total_steps=6, mode=MODE_CCD, tau=0.3, seed=seed)
                local = decode(_fresh(6, 6), OraclePredictor(oracle), cfg)
                with RemotePredictor(tcp_transport, timeout=15) as remote:
                    over_wire = decode(_fresh(6, 6), remote, cfg)
                assert trace_text(over_wire) == trace_text(local), (
                    f"tcp transport diverged at seed {seed}")
                matched += 1
        finally:
            server.terminate()
            server.wait(timeout=10)
    return f"{matched} runs byte-identical across exec and tcp; compliance probes green"


# --- registry and runner --------------------------------------------------------

PRIMARY_CHECKS: list[tuple[str, float, object]] = [
    ("baseline-reduction", 10.0, check_baseline_reduction),
    ("chain-rule-identity", 5.0, check_chain_rule_identity),
    ("marginalization-convergence", 30.0, check_marginalization_convergence),
    ("buffer-memory-bound", 5.0, check_buffer_memory_bound),
    ("sampling-error-tracks-mi", 60.0, check_sampling_error_tracks_mi),
    ("plateau-speedup", 10.0, check_plateau_speedup),
    ("budget-legality", 10.0, check_budget_legality),
    ("ter-exactness", 5.0, check_ter_exactness),
]

SECONDARY_CHECKS: list[tuple[str, float, object]] = [
    ("protocol-transparency", 30.0, check_protocol_transparency),
]


def run_acceptance(include_secondary: bool = False,
                   only: str | None = None) -> list[CheckOutcome]:
    checks = list(PRIMARY_CHECKS)
    if include_secondary:
        checks += SECONDARY_CHECKS
    outcomes: list[CheckOutcome] = []
    for name, budget, fn in checks:
        if only and only not in name:
            continue
        start = time.perf_counter()
        try:
            detail = fn()
            passed = True
        except AssertionError as exc:
            detail = str(exc) or "assertion failed"
            passed = False
        except Exception as exc:  # noqa: BLE001 - a crashed check is a failed check
            detail = f"{type(exc).__name__}: {exc}"
            passed = False
        elapsed = time.perf_counter() - start
        if passed and elapsed > budget:
            passed = False
            detail = f"claims hold but took {elapsed:.1f}s, over the {budget:.0f}s budget"
        outcomes.append(CheckOutcome(name, passed, elapsed, detail))
    return outcomes
