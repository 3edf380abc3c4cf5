import json
import math
import shlex
import socket
import sys
import threading

import pytest

from ccd.core import SequenceState, Vocabulary
from ccd.oracles import FactorizedOracle, symmetric_chain
from ccd.oracle_server import handle_line, handshake_object, serve_connection
from ccd.protocol import (
    CheckResult,
    ProtocolError,
    RemotePredictor,
    parse_transport,
    serve_check,
)
from ccd.sampler import (
    MODE_CCD_DS,
    OraclePredictor,
    SamplerConfig,
    decode,
    trace_text,
)

FOUR_ROWS = [
    [0.7, 0.2, 0.05, 0.05],
    [0.1, 0.6, 0.1, 0.2],
    [0.05, 0.05, 0.8, 0.1],
    [0.25, 0.25, 0.25, 0.25],
]


@pytest.fixture
def oracle_file(tmp_path):
    oracle = symmetric_chain(4, 0.85)
    path = tmp_path / "oracle.json"
    path.write_text(json.dumps(oracle.to_json()))
    return oracle, str(path)


def exec_transport(path):
    return f"exec:{shlex.quote(sys.executable)} -m ccd.oracle_server --oracle {shlex.quote(path)}"


class OracleTcpServer(threading.Thread):
    """Serves the reference loop for one connection on an ephemeral port."""

    def __init__(self, oracle):
        super().__init__(daemon=True)
        self.oracle = oracle
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.port = self.sock.getsockname()[1]

    def run(self):
        conn, _ = self.sock.accept()
        with conn:
            rfile = conn.makefile("r", encoding="utf-8")
            wfile = conn.makefile("w", encoding="utf-8")
            try:
                serve_connection(self.oracle, rfile, wfile)
            except (BrokenPipeError, ConnectionResetError):
                pass
        self.sock.close()


class ScriptedTcpServer(threading.Thread):
    """Plays a fixed handler against one client, for misbehavior tests."""

    def __init__(self, handler):
        super().__init__(daemon=True)
        self.handler = handler
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.port = self.sock.getsockname()[1]

    def run(self):
        conn, _ = self.sock.accept()
        with conn:
            rfile = conn.makefile("r", encoding="utf-8")
            wfile = conn.makefile("w", encoding="utf-8")
            try:
                self.handler(rfile, wfile)
            except (BrokenPipeError, ConnectionResetError):
                pass
        self.sock.close()


def scripted(handler):
    server = ScriptedTcpServer(handler)
    server.start()
    return f"tcp:127.0.0.1:{server.port}"


def good_handshake(wfile, size=4):
    wfile.write(json.dumps({"type": "handshake", "vocab_size": size,
                            "mask_id": size, "eos_id": size - 1}) + "\n")
    wfile.flush()


class TestParseTransport:
    def test_exec_form(self):
        kind, argv = parse_transport("exec:python3 -m ccd.oracle_server --oracle x.json")
        assert kind == "exec"
        assert argv[0] == "python3"
        assert "--oracle" in argv

    def test_tcp_form(self):
        assert parse_transport("tcp:127.0.0.1:9741") == ("tcp", "127.0.0.1", 9741)

    def test_rejects_unknown_scheme(self):
        with pytest.raises(ValueError, match="unknown transport"):
            parse_transport("http://somewhere")

    def test_rejects_bad_port(self):
        with pytest.raises(ValueError, match="port"):
            parse_transport("tcp:localhost:notaport")

    def test_rejects_empty_exec(self):
        with pytest.raises(ValueError, match="command"):
            parse_transport("exec:   ")


class TestServerValidation:
    oracle = FactorizedOracle(FOUR_ROWS, Vocabulary(4))

    def ask(self, obj, last_id=0):
        return handle_line(self.oracle, json.dumps(obj), last_id)

    def test_handshake_fields(self):
        hs = handshake_object(self.oracle)
        assert hs == {"type": "handshake", "vocab_size": 4, "mask_id": 4, "eos_id": 3}

    def test_happy_path(self):
        reply, last = self.ask({"type": "predict", "id": 1, "prompt": [],
                                "response": [None] * 4, "need": [0, 2]})
        assert reply["type"] == "reply" and reply["id"] == 1 and last == 1
        assert set(reply["dists"]) == {"0", "2"}
        assert reply["dists"]["0"] == FOUR_ROWS[0]

    def test_unparseable_line(self):
        reply, last = handle_line(self.oracle, "{nope", 0)
        assert reply["type"] == "error" and reply["id"] is None and last == 0

    def test_non_increasing_id(self):
        reply, last = self.ask({"type": "predict", "id": 3, "prompt": [],
                                "response": [None] * 4, "need": [0]}, last_id=3)
        assert reply["type"] == "error"
        assert "increase" in reply["reason"]

    def test_need_must_be_masked(self):
        reply, _ = self.ask({"type": "predict", "id": 1, "prompt": [],
                             "response": [2, None, None, None], "need": [0]})
        assert reply["type"] == "error"
        assert "not masked" in reply["reason"]

    def test_need_out_of_range(self):
        reply, _ = self.ask({"type": "predict", "id": 1, "prompt": [],
                             "response": [None] * 4, "need": [7]})
        assert reply["type"] == "error"
        assert "out of range" in reply["reason"]

    def test_missing_field(self):
        reply, _ = self.ask({"type": "predict", "id": 1})
        assert reply["type"] == "error"
        assert "required" in reply["reason"]

    def test_unknown_type(self):
        reply, _ = self.ask({"type": "train", "id": 1})
        assert reply["type"] == "error"

    def test_oracle_length_mismatch_reported(self):
        reply, _ = self.ask({"type": "predict", "id": 1, "prompt": [],
                             "response": [None] * 7, "need": [0]})
        assert reply["type"] == "error"
        assert "rejected" in reply["reason"]


class TestExecTransport:
    def test_round_trip_matches_local_adapter(self, oracle_file):
        oracle, path = oracle_file
        with RemotePredictor(exec_transport(path)) as remote:
            assert remote.vocab == oracle.vocab
            state = SequenceState((), (None,) * 5, 5)
            local = OraclePredictor(oracle)(state, [0, 3])
            over_wire = remote(state, [0, 3])
            assert set(over_wire) == {0, 3}
            for i in over_wire:
                assert over_wire[i].probs == local[i].probs

    def test_full_decode_trace_is_byte_identical(self, oracle_file):
        oracle, path = oracle_file
        cfg = SamplerConfig(total_steps=6, mode=MODE_CCD_DS, tau=0.4, seed=17)
        state = SequenceState.initial((), 6, 6)
        local = decode(state, OraclePredictor(oracle), cfg)
        with RemotePredictor(exec_transport(path)) as remote:
            over_wire = decode(state, remote, cfg)
        assert trace_text(over_wire) == trace_text(local)

    def test_server_exits_cleanly_on_eof(self, oracle_file):
        _, path = oracle_file
        remote = RemotePredictor(exec_transport(path))
        remote.close()
        assert remote._proc.returncode == 0


class TestTcpTransport:
    def test_round_trip_matches_local_adapter(self):
        oracle = symmetric_chain(3, 0.7)
        server = OracleTcpServer(oracle)
        server.start()
        with RemotePredictor(f"tcp:127.0.0.1:{server.port}") as remote:
            state = SequenceState((), (None, 1, None), 2)
            local = OraclePredictor(oracle)(state, [0, 2])
            over_wire = remote(state, [0, 2])
            for i in (0, 2):
                assert over_wire[i].probs == local[i].probs


class TestClientValidation:
    def test_rejects_missing_handshake(self):
        def handler(rfile, wfile):
            wfile.write(json.dumps({"type": "reply", "id": 0, "dists": {}}) + "\n")
            wfile.flush()
        with pytest.raises(ProtocolError, match="handshake"):
            RemotePredictor(scripted(handler), timeout=5)

    def test_rejects_wrong_reply_id(self):
        def handler(rfile, wfile):
            good_handshake(wfile)
            rfile.readline()
            wfile.write(json.dumps({"type": "reply", "id": 99, "dists": {"0": [1, 0, 0, 0]}}) + "\n")
            wfile.flush()
        remote = RemotePredictor(scripted(handler), timeout=5)
        with pytest.raises(ProtocolError, match="does not match"):
            remote(SequenceState((), (None,), 1), [0])

    def test_rejects_bad_sum_naming_position(self):
        def handler(rfile, wfile):
            good_handshake(wfile)
            rfile.readline()
            wfile.write(json.dumps({"type": "reply", "id": 1,
                                    "dists": {"0": [0.5, 0.4, 0.0, 0.0]}}) + "\n")
            wfile.flush()
        remote = RemotePredictor(scripted(handler), timeout=5)
        with pytest.raises(ProtocolError, match=r"reply\.dists\.0 sums to"):
            remote(SequenceState((), (None,), 1), [0])

    def test_rejects_negative_entry_naming_cell(self):
        def handler(rfile, wfile):
            good_handshake(wfile)
            rfile.readline()
            wfile.write(json.dumps({"type": "reply", "id": 1,
                                    "dists": {"0": [1.2, -0.2, 0.0, 0.0]}}) + "\n")
            wfile.flush()
        remote = RemotePredictor(scripted(handler), timeout=5)
        with pytest.raises(ProtocolError, match=r"reply\.dists\.0\[1\] is negative"):
            remote(SequenceState((), (None,), 1), [0])

    def test_rejects_missing_position(self):
        def handler(rfile, wfile):
            good_handshake(wfile)
            rfile.readline()
            wfile.write(json.dumps({"type": "reply", "id": 1, "dists": {}}) + "\n")
            wfile.flush()
        remote = RemotePredictor(scripted(handler), timeout=5)
        with pytest.raises(ProtocolError, match="missing positions"):
            remote(SequenceState((), (None,), 1), [0])

    def test_server_error_reply_surfaces_reason(self):
        def handler(rfile, wfile):
            good_handshake(wfile)
            rfile.readline()
            wfile.write(json.dumps({"type": "error", "id": 1, "reason": "no such model"}) + "\n")
            wfile.flush()
        remote = RemotePredictor(scripted(handler), timeout=5)
        with pytest.raises(ProtocolError, match="no such model"):
            remote(SequenceState((), (None,), 1), [0])

    def test_within_tolerance_sum_is_renormalized(self):
        row = [0.25, 0.25, 0.25, 0.25 + 5e-7]
        def handler(rfile, wfile):
            good_handshake(wfile)
            rfile.readline()
            wfile.write(json.dumps({"type": "reply", "id": 1, "dists": {"0": row}}) + "\n")
            wfile.flush()
        remote = RemotePredictor(scripted(handler), timeout=5)
        dists = remote(SequenceState((), (None,), 1), [0])
        assert math.isclose(sum(dists[0].probs), 1.0, abs_tol=1e-12)

    def test_timeout_is_reported(self):
        def handler(rfile, wfile):
            good_handshake(wfile)
            rfile.readline()
            import time
            time.sleep(3)
        remote = RemotePredictor(scripted(handler), timeout=0.2)
        with pytest.raises(ProtocolError, match="timed out"):
            remote(SequenceState((), (None,), 1), [0])


class TestServeCheck:
    def test_reference_server_passes_all_probes(self, oracle_file):
        oracle, path = oracle_file
        results = serve_check(exec_transport(path), oracle=oracle, length=4, timeout=10)
        assert [r.name for r in results] == [
            "handshake", "predict-roundtrip", "error-reply", "recovery", "increasing-ids"]
        failures = [r for r in results if not r.ok]
        assert failures == []
        roundtrip = next(r for r in results if r.name == "predict-roundtrip")
        assert "bit-identical" in roundtrip.detail

    def test_detects_server_that_drops_malformed_requests(self):
        # Answers predicts correctly but closes on a malformed line.
        oracle = FactorizedOracle(FOUR_ROWS, Vocabulary(4))

        def handler(rfile, wfile):
            good_handshake(wfile)
            last = 0
            for line in rfile:
                obj = json.loads(line)
                if "response" not in obj:
                    return  # rude: hang up instead of an error reply
                reply, last = handle_line(oracle, line, last)
                wfile.write(json.dumps(reply) + "\n")
                wfile.flush()

        results = serve_check(scripted(handler), length=4, timeout=5)
        by_name = {r.name: r for r in results}
        assert by_name["handshake"].ok
        assert by_name["predict-roundtrip"].ok
        assert not by_name["error-reply"].ok

    def test_detects_wrong_dists(self, oracle_file):
        oracle, _ = oracle_file

        def handler(rfile, wfile):
            good_handshake(wfile)
            for line in rfile:
                obj = json.loads(line)
                reply = {"type": "reply", "id": obj.get("id"),
                         "dists": {str(i): [0.4, 0.2, 0.2, 0.2]
                                   for i in obj.get("need", [])}}
                wfile.write(json.dumps(reply) + "\n")
                wfile.flush()

        results = serve_check(scripted(handler), oracle=oracle, length=4, timeout=5)
        roundtrip = next(r for r in results if r.name == "predict-roundtrip")
        assert not roundtrip.ok
        assert "differs" in roundtrip.detail
