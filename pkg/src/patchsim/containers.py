"""Flat binary container for named float64 arrays (checkpoints).

Byte layout (version 1):

    line 0:        b"F64ARRAYS 1 <count>\n"
    lines 1..n:    b"<name> f64 <shape>\n"   shape = "()" for rank-0,
                                             else dims joined by "x", e.g. "128x64"
    separator:     b"\n"
    payload:       for each array, in header order: raw little-endian
                   IEEE-754 float64 values in C (row-major) order.

Names may contain ASCII letters, digits, and ``._/-``. The writer emits
arrays in the order of the input mapping, so callers control canonical
ordering (training sorts parameter names).
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = "F64ARRAYS 1"
_NAME_RE = re.compile(r"^[A-Za-z0-9._/\-]+$")


def _shape_str(shape: tuple[int, ...]) -> str:
    return "()" if shape == () else "x".join(str(d) for d in shape)


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "()":
        return ()
    try:
        return tuple(int(d) for d in text.split("x"))
    except ValueError as e:
        raise DataError(f"bad shape field {text!r}") from e


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    header = [f"{_MAGIC} {len(arrays)}\n"]
    payload = []
    for name, arr in arrays.items():
        if not _NAME_RE.match(name):
            raise DataError(f"illegal array name {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        header.append(f"{name} f64 {_shape_str(a.shape)}\n")
        payload.append(a.astype("<f8", copy=False).tobytes(order="C"))
    blob = "".join(header).encode("ascii") + b"\n" + b"".join(payload)
    Path(path).write_bytes(blob)


def load_arrays(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: truncated container header")
    first = blob[:nl].decode("ascii", errors="replace")
    parts = first.split(" ")
    if len(parts) != 3 or " ".join(parts[:2]) != _MAGIC:
        raise DataError(f"{path}: bad magic line {first!r}")
    count = int(parts[2])
    pos = nl + 1
    entries = []
    for _ in range(count):
        nl = blob.find(b"\n", pos)
        fields = blob[pos:nl].decode("ascii").split(" ")
        if len(fields) != 3 or fields[1] != "f64":
            raise DataError(f"{path}: bad header entry {blob[pos:nl]!r}")
        entries.append((fields[0], _parse_shape(fields[2])))
        pos = nl + 1
    if blob[pos : pos + 1] != b"\n":
        raise DataError(f"{path}: missing header/payload separator")
    pos += 1
    out: dict[str, np.ndarray] = {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        chunk = blob[pos : pos + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise DataError(f"{path}: trailing bytes after payload")
    return out
