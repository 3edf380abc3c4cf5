"""Canonical JSON serialization and atomic file writes.

Every file the engine emits goes through dumps_canonical (sorted keys, no
whitespace, strict finiteness) so identical runs produce byte-identical
artifacts, and through atomic_write_text (temp file + rename) so readers
never observe a half-written file.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Iterable


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str, objects: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(dumps_canonical(o) + "\n" for o in objects))


def read_jsonl(path: str) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
