"""Canonical JSON emission for scenario-family text files.

Files written here must be byte-stable: the same in-memory object always
serializes to the same bytes, and every float round-trips exactly. Floats
are formatted with 17 significant digits (enough to reproduce any IEEE-754
double); dict keys keep their insertion order, which writers fix by
constructing documents in schema order. Reading uses the stdlib parser.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError


def _format_float(x: float) -> str:
    if x != x or x in (float("inf"), float("-inf")):
        raise DataError("non-finite float cannot be serialized")
    return f"{x:.17g}"


def _emit(obj, parts: list[str]) -> None:
    if isinstance(obj, dict):
        parts.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                parts.append(",")
            parts.append(json.dumps(str(k)))
            parts.append(":")
            _emit(v, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, v in enumerate(obj):
            if i:
                parts.append(",")
            _emit(v, parts)
        parts.append("]")
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, bool):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_format_float(float(obj)))
    elif obj is None:
        parts.append("null")
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), parts)
    else:
        raise DataError(f"cannot serialize object of type {type(obj).__name__}")


def dumps(obj) -> str:
    parts: list[str] = []
    _emit(obj, parts)
    parts.append("\n")
    return "".join(parts)


def dump(obj, path) -> None:
    Path(path).write_bytes(dumps(obj).encode("utf-8"))


def load(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
