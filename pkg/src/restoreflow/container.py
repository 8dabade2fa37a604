"""Tagged binary container used by adapter (E2RA) and checkpoint (E2RC) files.

Layout::

    magic       4 bytes ASCII
    version     u32 little-endian
    header_len  u32 little-endian
    header      UTF-8 JSON (sorted keys), must contain "tensors": [{"name", "shape"}, ...]
    payloads    little-endian float64 arrays, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_PREFIX = struct.Struct("<4sII")


class ContainerError(ValueError):
    pass


class CorruptFileError(ContainerError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class VersionMismatchError(ContainerError):
    pass


def encode(magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_PREFIX.pack(magic, version, len(blob)), blob]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
    return b"".join(parts)


def decode(raw: bytes, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(raw) < _PREFIX.size:
        raise CorruptFileError("file shorter than the fixed prefix", len(raw))
    got_magic, got_version, hlen = _PREFIX.unpack_from(raw, 0)
    if got_magic != magic:
        raise CorruptFileError(f"bad magic {got_magic!r}, expected {magic!r}", 0)
    if got_version != version:
        raise VersionMismatchError(f"file version {got_version} but this reader supports version {version}")
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise CorruptFileError(f"header length {hlen} runs past end of file", start)
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        specs = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"unreadable header: {exc}", start) from None
    offset = start + hlen
    arrays: dict[str, np.ndarray] = {}
    for spec in specs:
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CorruptFileError(f"payload for {spec['name']!r} truncated", offset)
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CorruptFileError(f"{len(raw) - offset} trailing bytes after payloads", offset)
    return header, arrays


def write(path, magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> int:
    data = encode(magic, version, header, arrays)
    Path(path).write_bytes(data)
    return len(data)


def read(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic, version)
