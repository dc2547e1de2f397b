"""Framed binary checkpoints.

Layout (little-endian throughout)::

    b"CATG" | u32 version | section*

    section = 4-byte tag | u64 payload length | payload

Sections: ``CONF`` (canonical config text, UTF-8), ``SCHD`` and ``PARM``
(tensor lists), ``HIST`` (training-state tensors), ``RNGS`` (generator state
as JSON text). A tensor list is ``u32 count`` followed by, per tensor,
``u16 name length | name | u8 dtype code | u8 ndim | u64 dims[ndim] | raw bytes``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CATG"
VERSION = 1

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8"), 4: np.dtype("<i4"), 5: np.dtype("u1")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointData:
    config_text: str
    params: dict[str, np.ndarray]
    schedule: dict[str, np.ndarray] = field(default_factory=dict)
    history: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        out.write(struct.pack("<H", len(key)))
        out.write(key)
        out.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return out.getvalue()


def _unpack_tensors(payload: bytes) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated tensor section")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError("trailing bytes in tensor section")
    return tensors


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def dumps(ckpt: CheckpointData) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_section(b"CONF", ckpt.config_text.encode("utf-8")))
    parts.append(_section(b"SCHD", _pack_tensors(ckpt.schedule)))
    parts.append(_section(b"PARM", _pack_tensors(ckpt.params)))
    parts.append(_section(b"HIST", _pack_tensors(ckpt.history)))
    rng = json.dumps(ckpt.rng_state, sort_keys=True) if ckpt.rng_state is not None else ""
    parts.append(_section(b"RNGS", rng.encode("utf-8")))
    return b"".join(parts)


def loads(blob: bytes) -> CheckpointData:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    pos = 8
    sections = {}
    while pos < len(blob):
        if pos + 12 > len(blob):
            raise CheckpointError("truncated section header")
        tag = blob[pos : pos + 4]
        (n,) = struct.unpack("<Q", blob[pos + 4 : pos + 12])
        pos += 12
        if pos + n > len(blob):
            raise CheckpointError(f"section {tag!r} is truncated")
        sections[tag] = blob[pos : pos + n]
        pos += n
    for tag in (b"CONF", b"PARM"):
        if tag not in sections:
            raise CheckpointError(f"missing section {tag.decode()}")
    rng = sections.get(b"RNGS", b"").decode("utf-8")
    return CheckpointData(
        config_text=sections[b"CONF"].decode("utf-8"),
        params=_unpack_tensors(sections[b"PARM"]),
        schedule=_unpack_tensors(sections[b"SCHD"]) if b"SCHD" in sections else {},
        history=_unpack_tensors(sections[b"HIST"]) if b"HIST" in sections else {},
        rng_state=json.loads(rng) if rng else None,
    )


def save(path, ckpt: CheckpointData):
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> CheckpointData:
    return loads(Path(path).read_bytes())
