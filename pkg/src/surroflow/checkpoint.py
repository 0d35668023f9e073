"""Checkpoint file format: a plain-text header followed by raw float32 data.

Layout::

    surroflow-checkpoint v1\n
    meta <single-line JSON object>\n
    tensor <name> <shape as JSON list>\n   (one line per tensor, saved order)
    end\n
    <payload: little-endian float32, tensors back to back in header order>

The header is readable with ``head`` and the payload offset of any tensor
follows from the shapes alone. Scalars that must survive round-trips exactly
(learning rate, step counters) belong in ``meta``, which JSON stores at full
double precision; the payload is always float32.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = "surroflow-checkpoint"
VERSION = 1
_END = b"\nend\n"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays and a metadata dict to ``path``."""
    lines = [f"{MAGIC} v{VERSION}", "meta " + json.dumps(meta or {})]
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise DataError(f"invalid tensor name {name!r}")
        lines.append(f"tensor {name} {json.dumps(list(np.shape(arr)))}")
    header = ("\n".join(lines)).encode("utf-8") + _END
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint, returning ``(tensors, meta)``.

    Raises :class:`DataError` on any structural inconsistency, including a
    payload whose length does not match the declared shapes.
    """
    raw = Path(path).read_bytes()
    cut = raw.find(_END)
    if cut < 0:
        raise DataError(f"{path}: missing end-of-header marker")
    try:
        header = raw[:cut].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: undecodable header") from exc
    payload = raw[cut + len(_END):]

    lines = header.split("\n")
    if not lines or lines[0] != f"{MAGIC} v{VERSION}":
        raise DataError(f"{path}: bad magic line {lines[0]!r}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise DataError(f"{path}: missing meta line")
    try:
        meta = json.loads(lines[1][len("meta "):])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed meta JSON") from exc

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for line in lines[2:]:
        parts = line.split(" ", 2)
        if len(parts) != 3 or parts[0] != "tensor":
            raise DataError(f"{path}: malformed header line {line!r}")
        name = parts[1]
        if name in tensors:
            raise DataError(f"{path}: duplicate tensor {name!r}")
        try:
            shape = tuple(int(d) for d in json.loads(parts[2]))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: bad shape on line {line!r}") from exc
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise DataError(
                f"{path}: payload truncated at tensor {name!r} "
                f"(need {offset + nbytes} bytes, have {len(payload)})"
            )
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise DataError(
            f"{path}: {len(payload) - offset} trailing payload bytes beyond declared tensors"
        )
    return tensors, meta
