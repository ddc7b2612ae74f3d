"""Versioned flat-text checkpoint format.

Layout::

    abnet-checkpoint 1
    meta <key> <value>
    array <name> <d0,d1,...> <v0> <v1> ...
    end <sha256 of everything above>

Floats are written with 17 significant digits, so values round-trip
exactly and identical state always produces identical bytes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

MAGIC = "abnet-checkpoint 1"


class CheckpointError(Exception):
    """Unreadable, truncated or tampered checkpoint."""


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dumps(arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> str:
    lines = [MAGIC]
    for key, value in sorted((meta or {}).items()):
        if any(c.isspace() for c in key + str(value)):
            raise ValueError(f"meta entries may not contain whitespace: {key}={value!r}")
        lines.append(f"meta {key} {value}")
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape) or "scalar"
        values = " ".join(_fmt(v) for v in arr.reshape(-1))
        lines.append(f"array {name} {shape} {values}".rstrip())
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("ascii")).hexdigest()
    return body + f"end {digest}\n"


def loads(text: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    body, sep, trailer = text.rpartition("end ")
    if not sep or not body.startswith(MAGIC + "\n"):
        raise CheckpointError("not an abnet checkpoint (bad header or missing trailer)")
    if hashlib.sha256(body.encode("ascii", errors="replace")).hexdigest() != trailer.strip():
        raise CheckpointError("checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(body.splitlines()[1:], start=2):
        parts = line.split(" ")
        try:
            if parts[0] == "meta":
                meta[parts[1]] = parts[2]
            elif parts[0] == "array":
                name, shape_s = parts[1], parts[2]
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
                values = np.array([float(v) for v in parts[3:]], dtype=np.float64)
                arrays[name] = values.reshape(shape)
            else:
                raise CheckpointError(f"line {lineno}: unknown record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"line {lineno}: {exc}") from exc
    return arrays, meta


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps(arrays, meta), encoding="ascii")
    tmp.replace(path)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: not ascii text") from exc
    return loads(text)
