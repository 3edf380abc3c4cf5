"""Newline-delimited JSON predictor protocol, client side.

One JSON object per line.  The server speaks first:

    {"type": "handshake", "vocab_size": 4, "mask_id": 4, "eos_id": 3}

then answers requests

    {"type": "predict", "id": 1, "prompt": [], "response": [null, 2], "need": [0]}

with either

    {"type": "reply", "id": 1, "dists": {"0": [0.1, 0.2, 0.3, 0.4]}}

or {"type": "error", "id": 1, "reason": "..."}.  Request ids are strictly
increasing within a connection.  Two transports: "exec:CMD" spawns CMD and
talks over its stdio; "tcp:HOST:PORT" connects a socket.

Replies are validated (length, finiteness, non-negativity, sum within 1e-6)
and then renormalized through the same Distribution constructor the
in-process adapter uses, so a server that reproduces the oracle arithmetic
bit-for-bit yields byte-identical traces.
"""

from __future__ import annotations

from dataclasses import dataclass
import json
import math
import os
import select
import shlex
import socket
import subprocess
import time
from typing import Mapping, Sequence

from .core import Distribution, SequenceState, Vocabulary
from .sampler import PredictorError

DEFAULT_TIMEOUT = 30.0
SUM_TOLERANCE = 1e-6


class ProtocolError(PredictorError):
    pass


def parse_transport(spec: str) -> tuple:
    """Split a transport string into ("exec", argv) or ("tcp", host, port)."""
    if spec.startswith("exec:"):
        command = spec[len("exec:"):].strip()
        if not command:
            raise ValueError("exec transport needs a command after 'exec:'")
        return ("exec", shlex.split(command))
    if spec.startswith("tcp:"):
        rest = spec[len("tcp:"):]
        host, sep, port_text = rest.rpartition(":")
        if not sep or not host:
            raise ValueError(f"tcp transport must look like tcp:HOST:PORT, got {spec!r}")
        try:
            port = int(port_text)
        except ValueError:
            raise ValueError(f"tcp port must be an integer, got {port_text!r}") from None
        if not 0 < port < 65536:
            raise ValueError(f"tcp port out of range: {port}")
        return ("tcp", host, port)
    raise ValueError(f"unknown transport {spec!r}; expected exec:CMD or tcp:HOST:PORT")


class _Channel:
    """Line-oriented byte channel over a pipe pair or a socket, with timeouts."""

    def __init__(self, read_fd: int, write, closer, describe: str):
        self._read_fd = read_fd
        self._write = write
        self._closer = closer
        self._buffer = bytearray()
        self.describe = describe

    def read_line(self, timeout: float) -> str:
        deadline = time.monotonic() + timeout
        while True:
            newline = self._buffer.find(b"\n")
            if newline >= 0:
                line = self._buffer[:newline].decode("utf-8")
                del self._buffer[:newline + 1]
                return line
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ProtocolError(f"timed out after {timeout}s waiting for {self.describe}")
            ready, _, _ = select.select([self._read_fd], [], [], remaining)
            if not ready:
                raise ProtocolError(f"timed out after {timeout}s waiting for {self.describe}")
            chunk = os.read(self._read_fd, 65536)
            if not chunk:
                raise ProtocolError(f"{self.describe} closed the connection")
            self._buffer.extend(chunk)

    def write_line(self, text: str) -> None:
        self._write(text.encode("utf-8") + b"\n")

    def close(self) -> None:
        self._closer()


def _open_channel(transport: str) -> tuple[_Channel, subprocess.Popen | None]:
    kind, *rest = parse_transport(transport)
    if kind == "exec":
        argv = rest[0]
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

        def write(data: bytes):
            proc.stdin.write(data)
            proc.stdin.flush()

        def close():
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.terminate()
                proc.wait(timeout=5)

        return _Channel(proc.stdout.fileno(), write, close, f"server process {argv[0]}"), proc
    host, port = rest
    sock = socket.create_connection((host, port), timeout=DEFAULT_TIMEOUT)
    sock.setblocking(True)
    return _Channel(sock.fileno(), sock.sendall, sock.close, f"server at {host}:{port}"), None


def _parse_handshake(line: str) -> Vocabulary:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"handshake is not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or obj.get("type") != "handshake":
        raise ProtocolError(f"expected a handshake object first, got {obj!r}")
    for field in ("vocab_size", "mask_id", "eos_id"):
        if not isinstance(obj.get(field), int):
            raise ProtocolError(f"handshake.{field} must be an integer")
    try:
        return Vocabulary(obj["vocab_size"], obj["mask_id"], obj["eos_id"])
    except ValueError as exc:
        raise ProtocolError(f"handshake describes an invalid vocabulary: {exc}") from None


def _validate_reply_dists(obj: Mapping, need: Sequence[int], vocab_size: int) -> dict[int, Distribution]:
    dists = obj.get("dists")
    if not isinstance(dists, dict):
        raise ProtocolError("reply.dists must be an object keyed by position")
    want = {str(i) for i in need}
    got = set(dists)
    if got != want:
        missing = sorted(want - got)
        surplus = sorted(got - want)
        parts = []
        if missing:
            parts.append(f"missing positions {missing}")
        if surplus:
            parts.append(f"unrequested positions {surplus}")
        raise ProtocolError("reply.dists " + " and ".join(parts))
    out: dict[int, Distribution] = {}
    for i in sorted(need):
        row = dists[str(i)]
        where = f"reply.dists.{i}"
        if not isinstance(row, list) or len(row) != vocab_size:
            raise ProtocolError(f"{where} must be a list of {vocab_size} probabilities")
        total = 0.0
        for k, p in enumerate(row):
            if not isinstance(p, (int, float)) or isinstance(p, bool) or not math.isfinite(p):
                raise ProtocolError(f"{where}[{k}] is not a finite number")
            if p < 0.0:
                raise ProtocolError(f"{where}[{k}] is negative")
            total += p
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise ProtocolError(f"{where} sums to {total!r}, outside 1 +/- {SUM_TOLERANCE}")
        out[i] = Distribution(row)
    return out


class RemotePredictor:
    """Predictor backed by a protocol server; drop-in for OraclePredictor."""

    def __init__(self, transport: str, timeout: float = DEFAULT_TIMEOUT):
        self.transport = transport
        self.timeout = timeout
        self._channel, self._proc = _open_channel(transport)
        self._next_id = 1
        try:
            self.vocab = _parse_handshake(self._channel.read_line(timeout))
        except BaseException:
            self._channel.close()
            raise

    def __call__(self, state: SequenceState, need: Sequence[int]) -> dict[int, Distribution]:
        need = sorted(need)
        request_id = self._next_id
        self._next_id += 1
        request = {
            "type": "predict",
            "id": request_id,
            "prompt": list(state.prompt),
            "response": [tok for tok in state.response],
            "need": need,
        }
        self._channel.write_line(json.dumps(request, separators=(",", ":")))
        line = self._channel.read_line(self.timeout)
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"reply is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ProtocolError(f"reply must be an object, got {type(obj).__name__}")
        if obj.get("id") != request_id:
            raise ProtocolError(f"reply id {obj.get('id')!r} does not match request id {request_id}")
        if obj.get("type") == "error":
            raise ProtocolError(f"server error: {obj.get('reason', '(no reason given)')}")
        if obj.get("type") != "reply":
            raise ProtocolError(f"unexpected reply type {obj.get('type')!r}")
        return _validate_reply_dists(obj, need, self.vocab.size)

    def close(self) -> None:
        self._channel.close()

    def __enter__(self) -> "RemotePredictor":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --- compliance probe ---------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def serve_check(transport: str, oracle=None, length: int | None = None,
                timeout: float = DEFAULT_TIMEOUT) -> list[CheckResult]:
    """Probe a server for protocol compliance.

    Covers the handshake, a predict round trip (bit-compared against a local
    oracle when one is given), the error reply for a malformed request, and
    recovery afterwards.  Returns one CheckResult per probe.
    """
    from .oracles import intrinsic_length  # local import to avoid a cycle

    results: list[CheckResult] = []
    channel, _proc = _open_channel(transport)
    next_id = 1

    def send(obj) -> dict:
        channel.write_line(json.dumps(obj, separators=(",", ":")))
        return json.loads(channel.read_line(timeout))

    try:
        try:
            vocab = _parse_handshake(channel.read_line(timeout))
            results.append(CheckResult(
                "handshake", True,
                f"vocab_size={vocab.size} mask_id={vocab.mask_id} eos_id={vocab.eos_id}"))
        except ProtocolError as exc:
            results.append(CheckResult("handshake", False, str(exc)))
            return results

        if length is None:
            length = intrinsic_length(oracle) if oracle is not None else None
        if length is None:
            length = 4

        def predict(need, response):
            nonlocal next_id
            request = {"type": "predict", "id": next_id, "prompt": [],
                       "response": response, "need": need}
            next_id += 1
            return request["id"], send(request)

        try:
            request_id, reply = predict([0], [None] * length)
            if reply.get("type") != "reply" or reply.get("id") != request_id:
                results.append(CheckResult(
                    "predict-roundtrip", False, f"unexpected reply {reply!r}"))
            else:
                dists = _validate_reply_dists(reply, [0], vocab.size)
                detail = "well-formed normalized distribution"
                ok = True
                if oracle is not None:
                    state = SequenceState((), (None,) * length, 0)
                    local = Distribution(oracle.predict(state)[0].probs)
                    if local.probs != dists[0].probs:
                        ok = False
                        detail = (f"server dist {list(dists[0].probs)} differs from "
                                  f"local oracle {list(local.probs)}")
                    else:
                        detail = "bit-identical to the local oracle"
                results.append(CheckResult("predict-roundtrip", ok, detail))
        except (ProtocolError, json.JSONDecodeError) as exc:
            results.append(CheckResult("predict-roundtrip", False, str(exc)))
            return results

        try:
            bad_id = next_id
            next_id += 1
            reply = send({"type": "predict", "id": bad_id})
            if reply.get("type") == "error" and reply.get("id") == bad_id:
                results.append(CheckResult(
                    "error-reply", True, f"reason: {reply.get('reason', '')!r}"))
            else:
                results.append(CheckResult(
                    "error-reply", False,
                    f"malformed request answered with {reply!r} instead of an error"))
        except ProtocolError as exc:
            results.append(CheckResult("error-reply", False, str(exc)))
            return results

        try:
            request_id, reply = predict([length - 1], [None] * length)
            ok = reply.get("type") == "reply" and reply.get("id") == request_id
            if ok:
                _validate_reply_dists(reply, [length - 1], vocab.size)
            results.append(CheckResult(
                "recovery", ok,
                "connection stayed usable after the error" if ok
                else f"post-error request failed: {reply!r}"))
        except (ProtocolError, json.JSONDecodeError) as exc:
            results.append(CheckResult("recovery", False, str(exc)))

        try:
            reply = send({"type": "predict", "id": 1, "prompt": [],
                          "response": [None] * length, "need": [0]})
            if reply.get("type") == "error":
                results.append(CheckResult("increasing-ids", True,
                                           "repeated id was rejected"))
            else:
                results.append(CheckResult("increasing-ids", False,
                                           "server accepted a non-increasing request id"))
        except ProtocolError as exc:
            results.append(CheckResult("increasing-ids", False, str(exc)))
    finally:
        channel.close()
    return results
