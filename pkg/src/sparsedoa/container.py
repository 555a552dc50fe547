"""Binary container shared by datasets, checkpoints and real-data imports.

Layout::

    b"SDOA" | uint64 LE header length | UTF-8 JSON header | float64 LE payload

The header always carries ``format``, ``version`` and ``payload_values`` (the
number of float64 values that follow).
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SDOA"
_PREFIX = len(MAGIC) + 8


class ContainerError(ValueError):
    pass


def pack(header: dict, payload: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(payload, dtype="<f8").ravel()
    header = dict(header, payload_values=int(payload.size))
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return MAGIC + struct.pack("<Q", len(text)) + text + payload.tobytes()


def unpack(blob: bytes, fmt: str, version: int) -> tuple[dict, np.ndarray]:
    if len(blob) < _PREFIX or blob[:4] != MAGIC:
        raise ContainerError("not a sparsedoa container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[4:_PREFIX])
    if len(blob) < _PREFIX + hlen:
        raise ContainerError(f"truncated header: need {_PREFIX + hlen} bytes, have {len(blob)}")
    try:
        header = json.loads(blob[_PREFIX:_PREFIX + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    if header.get("format") != fmt:
        raise ContainerError(f"expected format {fmt!r}, found {header.get('format')!r}")
    if header.get("version") != version:
        raise ContainerError(f"unsupported {fmt} version {header.get('version')} (expected {version})")
    body = blob[_PREFIX + hlen:]
    want = 8 * int(header.get("payload_values", -1))
    if want < 0:
        raise ContainerError("header lacks payload_values")
    if len(body) != want:
        raise ContainerError(f"payload length mismatch: expected {want} bytes, got {len(body)}")
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)
