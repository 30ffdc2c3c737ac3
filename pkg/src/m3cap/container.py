"""Binary container shared by parameter checkpoints and feature files.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"M3CNTNR\\0"
    offset 8   8 bytes   uint64 header length L
    offset 16  L bytes   UTF-8 JSON header
    offset 16+L          float64 payload, arrays back to back in header order,
                         each row-major

The header always carries ``format`` (a string naming the file kind) and
``version`` (an int); the remaining keys belong to the caller.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"M3CNTNR\0"
_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


class FormatError(ValueError):
    """Base class for unreadable container files."""


class MalformedHeaderError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class WidthMismatchError(FormatError):
    pass


def write(path, header: dict, arrays) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=_DTYPE).tobytes())


def read(path, fmt: str, versions=(1,)) -> tuple[dict, np.ndarray]:
    """Return ``(header, flat payload)``; shapes are the caller's business."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise MalformedHeaderError(f"{path}: not an m3 container (bad magic)")
    (hlen,) = _LEN.unpack_from(raw, 8)
    if 16 + hlen > len(raw):
        raise MalformedHeaderError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise MalformedHeaderError(
            f"{path}: expected format {fmt!r}, got {header.get('format') if isinstance(header, dict) else header!r}")
    if header.get("version") not in versions:
        raise UnsupportedVersionError(f"{path}: unsupported version {header.get('version')!r}")
    body = raw[16 + hlen:]
    if len(body) % _DTYPE.itemsize:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(body)} bytes)")
    return header, np.frombuffer(body, dtype=_DTYPE).astype(np.float64)


def split(payload: np.ndarray, shapes, path="<payload>") -> list[np.ndarray]:
    sizes = [int(np.prod(s, dtype=np.int64)) for s in shapes]
    need = sum(sizes)
    if payload.size < need:
        raise TruncatedPayloadError(
            f"{path}: truncated payload (expected {need} values, found {payload.size})")
    if payload.size > need:
        raise MalformedHeaderError(
            f"{path}: payload has {payload.size - need} values not described by the header")
    out, pos = [], 0
    for shape, n in zip(shapes, sizes):
        out.append(payload[pos:pos + n].reshape(shape).copy())
        pos += n
    return out
