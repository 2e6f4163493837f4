"""Header plus per-frame records, as JSON Lines or packed little-endian binary.

Both encodings carry the same content: a header dict and a set of named,
equally long arrays whose first axis is the frame index. Floats are written
with ``repr`` precision in JSON and as raw ``<f8`` in binary, so a write/read
round trip is bit exact either way.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
MAGIC = b"ANKFREC\x00"
_KINDS = {"f8": "<f8", "b1": "|b1", "i8": "<i8"}


class FormatError(ValueError):
    pass


def _kind(a: np.ndarray) -> str:
    if a.dtype == bool:
        return "b1"
    if np.issubdtype(a.dtype, np.integer):
        return "i8"
    return "f8"


def _layout(arrays: dict) -> list:
    n = None
    out = []
    for name, a in arrays.items():
        a = np.asarray(a)
        if n is None:
            n = a.shape[0]
        elif a.shape[0] != n:
            raise FormatError(f"field {name!r} has {a.shape[0]} frames, expected {n}")
        out.append([name, list(a.shape[1:]), _kind(a)])
    return out


def _dtype(fields: list) -> np.dtype:
    return np.dtype([(name, _KINDS[kind], tuple(shape)) for name, shape, kind in fields])


def _frames(arrays: dict) -> int:
    return int(np.asarray(next(iter(arrays.values()))).shape[0]) if arrays else 0


def write_jsonl(path, header: dict, arrays: dict) -> None:
    fields = _layout(arrays)
    cast = {name: np.asarray(arrays[name]).astype(_KINDS[kind]) for name, _, kind in fields}
    with open(path, "w") as fh:
        head = {"schema_version": SCHEMA_VERSION, "header": header, "fields": fields, "frames": _frames(arrays)}
        fh.write(json.dumps(head, allow_nan=False, sort_keys=True) + "\n")
        for k in range(_frames(arrays)):
            rec = {name: cast[name][k].tolist() for name, _, _ in fields}
            fh.write(json.dumps(rec, allow_nan=False) + "\n")


def read_jsonl(path) -> tuple:
    with open(path) as fh:
        first = fh.readline()
        if not first:
            raise FormatError(f"{path}: empty file")
        head = json.loads(first)
        if head.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"{path}: unsupported schema version {head.get('schema_version')!r}")
        fields = head["fields"]
        rows = [json.loads(line) for line in fh if line.strip()]
    if len(rows) != head["frames"]:
        raise FormatError(f"{path}: header promises {head['frames']} frames, found {len(rows)}")
    arrays = {}
    for name, shape, kind in fields:
        a = np.array([r[name] for r in rows], dtype=_KINDS[kind]).reshape([len(rows)] + shape)
        arrays[name] = a.astype(a.dtype.newbyteorder("="))
    return head["header"], arrays


def write_binary(path, header: dict, arrays: dict) -> None:
    fields = _layout(arrays)
    n = _frames(arrays)
    rec = np.empty(n, dtype=_dtype(fields))
    for name, _, _ in fields:
        rec[name] = arrays[name]
    head = json.dumps(
        {"schema_version": SCHEMA_VERSION, "header": header, "fields": fields, "frames": n},
        allow_nan=False, sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", SCHEMA_VERSION, len(head)))
        fh.write(head)
        fh.write(rec.tobytes())


def read_binary(path) -> tuple:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", blob, off)
    if version != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema version {version}")
    off += 8
    head = json.loads(blob[off : off + hlen])
    off += hlen
    dt = _dtype(head["fields"])
    if len(blob) - off != dt.itemsize * head["frames"]:
        raise FormatError(f"{path}: payload size does not match {head['frames']} frames")
    rec = np.frombuffer(blob, dtype=dt, count=head["frames"], offset=off)
    arrays = {}
    for name, _, kind in head["fields"]:
        a = np.array(rec[name])
        arrays[name] = a.astype(a.dtype.newbyteorder("="))
    return head["header"], arrays


def write_records(path, header: dict, arrays: dict) -> None:
    """Dispatch on the suffix: ``.jsonl`` or ``.bin``."""
    path = Path(path)
    if path.suffix == ".jsonl":
        write_jsonl(path, header, arrays)
    elif path.suffix == ".bin":
        write_binary(path, header, arrays)
    else:
        raise FormatError(f"{path}: expected a .jsonl or .bin suffix")


def read_records(path) -> tuple:
    path = Path(path)
    if path.suffix == ".jsonl":
        return read_jsonl(path)
    if path.suffix == ".bin":
        return read_binary(path)
    raise FormatError(f"{path}: expected a .jsonl or .bin suffix")
