"""Reference predictor server: serves an oracle file over the line protocol.

Run as a module:

    python3 -m ccd.oracle_server --oracle model.json              # stdio
    python3 -m ccd.oracle_server --oracle model.json --tcp 9741   # TCP

Each connection gets the handshake first, then request/reply lines.  A
malformed line produces an error reply and the connection keeps serving;
EOF ends the process with status 0.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
from typing import IO

from .core import SequenceState
from .oracles import Oracle, oracle_from_json


def handshake_object(oracle: Oracle) -> dict:
    return {
        "type": "handshake",
        "vocab_size": oracle.vocab.size,
        "mask_id": oracle.vocab.mask_id,
        "eos_id": oracle.vocab.eos_id,
    }


def _error(request_id, reason: str) -> dict:
    return {"type": "error", "id": request_id, "reason": reason}


def handle_line(oracle: Oracle, line: str, last_id: int) -> tuple[dict, int]:
    """One request in, one reply out, plus the updated id watermark."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        return _error(None, f"request is not valid JSON: {exc}"), last_id
    if not isinstance(obj, dict):
        return _error(None, "request must be a JSON object"), last_id
    request_id = obj.get("id")
    if not isinstance(request_id, int) or isinstance(request_id, bool):
        return _error(None, "request.id must be an integer"), last_id
    if request_id <= last_id:
        return _error(request_id,
                      f"request ids must increase; got {request_id} after {last_id}"), last_id
    last_id = request_id
    if obj.get("type") != "predict":
        return _error(request_id, f"unknown request type {obj.get('type')!r}"), last_id
    for field in ("prompt", "response", "need"):
        if field not in obj:
            return _error(request_id, f"request.{field} is required"), last_id
    prompt = obj["prompt"]
    response = obj["response"]
    need = obj["need"]
    size = oracle.vocab.size
    if not isinstance(prompt, list) or any(
            not isinstance(x, int) or isinstance(x, bool) or not 0 <= x < size for x in prompt):
        return _error(request_id, "request.prompt must be a list of in-vocabulary tokens"), last_id
    if not isinstance(response, list) or not response:
        return _error(request_id, "request.response must be a non-empty list"), last_id
    for k, x in enumerate(response):
        if x is None:
            continue
        if not isinstance(x, int) or isinstance(x, bool) or not 0 <= x < size:
            return _error(request_id,
                          f"request.response[{k}] must be null or an in-vocabulary token"), last_id
    if not isinstance(need, list) or not need:
        return _error(request_id, "request.need must be a non-empty list of positions"), last_id
    if len(set(need)) != len(need):
        return _error(request_id, "request.need repeats a position"), last_id
    for i in need:
        if not isinstance(i, int) or isinstance(i, bool) or not 0 <= i < len(response):
            return _error(request_id, f"request.need position {i!r} is out of range"), last_id
        if response[i] is not None:
            return _error(request_id, f"request.need position {i} is not masked"), last_id
    state = SequenceState(tuple(prompt), tuple(response), 0)
    try:
        produced = oracle.predict(state)
    except ValueError as exc:
        return _error(request_id, f"oracle rejected the request: {exc}"), last_id
    dists = {str(i): list(produced[i].probs) for i in sorted(need)}
    return {"type": "reply", "id": request_id, "dists": dists}, last_id


def serve_connection(oracle: Oracle, rfile: IO[str], wfile: IO[str]) -> None:
    def send(obj: dict) -> None:
        wfile.write(json.dumps(obj, separators=(",", ":")) + "\n")
        wfile.flush()

    send(handshake_object(oracle))
    last_id = 0
    for line in rfile:
        line = line.strip()
        if not line:
            continue
        reply, last_id = handle_line(oracle, line, last_id)
        send(reply)


def serve_stdio(oracle: Oracle) -> None:
    serve_connection(oracle, sys.stdin, sys.stdout)


def serve_tcp(oracle: Oracle, host: str, port: int) -> None:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as server:
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        print(f"listening on {host}:{server.getsockname()[1]}", file=sys.stderr)
        while True:
            conn, _addr = server.accept()
            with conn:
                rfile = conn.makefile("r", encoding="utf-8")
                wfile = conn.makefile("w", encoding="utf-8")
                try:
                    serve_connection(oracle, rfile, wfile)
                except (BrokenPipeError, ConnectionResetError):
                    pass


def load_oracle_file(path: str) -> Oracle:
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    return oracle_from_json(spec)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="serve an oracle file over the line protocol")
    parser.add_argument("--oracle", required=True, help="path to an oracle JSON file")
    parser.add_argument("--tcp", type=int, metavar="PORT",
                        help="listen on this TCP port instead of stdio")
    parser.add_argument("--host", default="127.0.0.1", help="bind address for --tcp")
    args = parser.parse_args(argv)
    try:
        oracle = load_oracle_file(args.oracle)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"cannot load oracle: {exc}", file=sys.stderr)
        return 2
    if args.tcp is not None:
        serve_tcp(oracle, args.host, args.tcp)
    else:
        serve_stdio(oracle)
    return 0


if __name__ == "__main__":
    sys.exit(main())
