"""Self-describing binary container shared by checkpoints, codebooks,
feature dumps and label files.

Layout (all integers little-endian)::

    b"HRNS" | u32 version | u32 crc32 | payload
    payload = u32 len | UTF-8 JSON metadata
              u32 n_tensors
              n_tensors x (u32 len | UTF-8 name | u8 dtype | u8 rank | rank x u64 extent | raw data)

The CRC32 covers magic, version and payload, and is verified before anything
else is parsed, so any corrupted byte surfaces as :class:`ChecksumError`.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Tuple

import numpy as np

MAGIC = b"HRNS"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<i4")}
_TAGS = {v.str: k for k, v in _DTYPES.items()}


class ContainerError(Exception):
    """Base class for unreadable container files."""


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class FormatError(ContainerError):
    pass


def _to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    a = np.asarray(t)
    le = a.dtype.newbyteorder("<")
    if le.str not in _TAGS:
        raise FormatError(f"unsupported dtype {a.dtype}")
    # ascontiguousarray would promote 0-d arrays to 1-d
    return np.array(a, dtype=le, order="C", copy=True)


def encode(meta: Mapping, tensors: Mapping[str, object]) -> bytes:
    parts = []
    js = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(js)))
    parts.append(js)
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        a = _to_numpy(t)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _TAGS[a.dtype.str], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    payload = b"".join(parts)
    header = MAGIC + struct.pack("<I", VERSION)
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    return header + struct.pack("<I", crc) + payload


def decode(blob: bytes, source: str = "<bytes>") -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if len(blob) < 12:
        raise ChecksumError(f"{source}: checksum failure (file truncated to {len(blob)} bytes)")
    (stored,) = struct.unpack("<I", blob[8:12])
    if zlib.crc32(blob[:8] + blob[12:]) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{source}: checksum failure")
    if blob[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise VersionError(f"{source}: format version {version}, expected {VERSION}")

    pos = 12

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{source}: payload ends early")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    try:
        (jlen,) = struct.unpack("<I", take(4))
        meta = json.loads(take(jlen).decode("utf-8"))
        (count,) = struct.unpack("<I", take(4))
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack("<I", take(4))
            name = take(nlen).decode("utf-8")
            tag, rank = struct.unpack("<BB", take(2))
            if tag not in _DTYPES:
                raise FormatError(f"{source}: unknown dtype tag {tag} for {name!r}")
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            dt = _DTYPES[tag]
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as e:
        raise FormatError(f"{source}: malformed payload ({e})") from e
    if pos != len(blob):
        raise FormatError(f"{source}: {len(blob) - pos} trailing bytes")
    return meta, tensors


def write(path, meta: Mapping, tensors: Mapping[str, object]) -> str:
    """Atomically write a container; returns its SHA-256 content hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(meta, tensors)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def read(path) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
