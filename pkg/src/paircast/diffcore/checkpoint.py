"""Checkpoint serialization: named parameters as raw little-endian float64.

Layout: one UTF-8 JSON header line (format version, optional metadata,
ordered parameter names and shapes), then the concatenated raw values in
header order. Byte-for-byte deterministic for identical inputs.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import CheckpointError

FORMAT_VERSION = 1


def save_checkpoint(path, named_values: dict, meta: dict | None = None):
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "params": [{"name": name, "shape": list(np.asarray(v).shape)}
                   for name, v in named_values.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for v in named_values.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ordered name->array dict, meta dict)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from None
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    body = raw[nl + 1:]
    values = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated data for parameter {entry['name']!r}")
        values[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after parameters")
    return values, header["meta"]
