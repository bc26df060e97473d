"""Checkpoint container.

Layout: one UTF-8 JSON header line, space-padded so the payload starts on an
8-byte boundary, then the little-endian float64 payload with parameters
concatenated in header order. The header records the payload offset.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], optimizer: dict | None = None,
                    meta: dict | None = None) -> None:
    names = list(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "names": names,
        "shapes": [list(np.shape(arrays[n])) for n in names],
        "optimizer": optimizer or {},
        "meta": meta or {},
        "payload_offset": 0,
    }
    # the offset's own digits change the header length, so iterate to a fixed point
    offset = 0
    while True:
        header["payload_offset"] = offset
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        need = len(raw) + 1
        aligned = (need + 7) // 8 * 8
        if aligned == offset:
            break
        offset = aligned
    blob = raw + b" " * (offset - need) + b"\n"
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in names)
    Path(path).write_bytes(blob + payload)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        return json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({exc})") from None


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header = read_header(path)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    raw = Path(path).read_bytes()
    payload = raw[header["payload_offset"]:]
    total = sum(int(np.prod(s)) for s in header["shapes"])
    if len(payload) != 8 * total:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays = {}
    pos = 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape))
        arrays[name] = flat[pos:pos + n].reshape(shape).copy()
        pos += n
    return arrays, header
