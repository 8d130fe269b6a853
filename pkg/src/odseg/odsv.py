"""ODSV volume files.

Little-endian layout::

    magic    4 bytes  b"ODSV"
    version  u32      1
    dtype    u8       0 = float32 values, 1 = uint8 labels
    ndim     u8
    extents  u32[ndim]
    spacing  f32[3]
    payload  row-major values, exactly prod(extents) * itemsize bytes
"""
from __future__ import annotations

import os
import struct

import numpy as np

from odseg.data import LabelMask, Volume

MAGIC = b"ODSV"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class VolumeFormatError(ValueError):
    """Malformed or unexpected ODSV file. ``reason`` is a short machine tag."""

    def __init__(self, reason, message):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


def encode(obj) -> bytes:
    if isinstance(obj, Volume):
        code, arr = 0, np.asarray(obj.values, dtype="<f4")
    elif isinstance(obj, LabelMask):
        code, arr = 1, np.asarray(obj.labels, dtype="u1")
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
    head = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<3f", *obj.spacing)
    return head + np.ascontiguousarray(arr).tobytes()


def decode(buf: bytes, expect: str | None = None):
    """Parse ODSV bytes; ``expect`` is ``"volume"`` or ``"labels"`` to enforce a dtype."""
    if len(buf) < 10:
        raise VolumeFormatError("truncated", f"{len(buf)} bytes is shorter than the header")
    if buf[:4] != MAGIC:
        raise VolumeFormatError("bad_magic", f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    version, code, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise VolumeFormatError("version", f"unsupported version {version}")
    if code not in DTYPES:
        raise VolumeFormatError("dtype", f"unknown dtype code {code}")
    if expect is not None and {"volume": 0, "labels": 1}[expect] != code:
        raise VolumeFormatError("dtype", f"expected {expect}, file holds code {code}")
    if ndim == 0 or ndim > 8:
        raise VolumeFormatError("ndim", f"bad rank {ndim}")
    off = 10
    need = off + 4 * ndim + 12
    if len(buf) < need:
        raise VolumeFormatError("truncated", "header cut short")
    extents = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    spacing = struct.unpack_from("<3f", buf, off)
    off += 12
    if any(e == 0 for e in extents):
        raise VolumeFormatError("extents", f"zero extent in {extents}")
    dt = DTYPES[code]
    nbytes = int(np.prod(extents, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != nbytes:
        raise VolumeFormatError("length", f"header declares {nbytes} payload bytes, "
                                          f"file has {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(extents)
    if code == 0:
        return Volume(arr.astype(np.float32), spacing)
    return LabelMask(arr.copy(), spacing)


def save_volume(obj, path) -> None:
    data = encode(obj)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_volume(path, expect: str | None = None):
    with open(path, "rb") as fh:
        return decode(fh.read(), expect)
