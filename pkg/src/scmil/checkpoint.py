"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes   b"SCMK"
    version    u8        1
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes     JSON object (run config, epoch, rng state, ...)
    n_records  u32
    n_records times:
        name_len  u16
        name      bytes  UTF-8 identifier
        rows      u32
        cols      u32
        payload   rows*cols float64, row-major

Optimizer moments are stored as ordinary records named ``adam.m/<id>`` and
``adam.v/<id>``; the optimizer step count lives in the metadata.
"""

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SCMK"
VERSION = 1


def save_checkpoint(path, arrays, metadata=None):
    """Write ``arrays`` (identifier -> 2-D array) plus JSON metadata."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise ValueError(f"checkpoint record {name!r} must be 2-D")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)))
        chunks.append(key)
        chunks.append(struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _take(buf, offset, size, what):
    if offset + size > len(buf):
        raise FormatError(f"truncated checkpoint while reading {what}", offset)
    return buf[offset:offset + size], offset + size


def load_checkpoint(path):
    """Return ``(arrays, metadata)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, off = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise FormatError(f"bad checkpoint magic {raw!r}", 0)
    raw, off = _take(buf, off, 5, "header")
    version, meta_len = struct.unpack("<BI", raw)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    raw, off = _take(buf, off, meta_len, "metadata")
    try:
        metadata = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", off - meta_len) from None
    raw, off = _take(buf, off, 4, "record count")
    (count,) = struct.unpack("<I", raw)
    arrays = {}
    for _ in range(count):
        raw, off = _take(buf, off, 2, "name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, name_len, "name")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 8, f"shape of {name!r}")
        rows, cols = struct.unpack("<II", raw)
        raw, off = _take(buf, off, 8 * rows * cols, f"payload of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last record", off)
    return arrays, metadata
