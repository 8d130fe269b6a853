"""ODSC checkpoint files.

Little-endian layout::

    magic      4 bytes  b"ODSC"
    version    u32      1
    meta_len   u32
    meta       UTF-8 JSON: network config, optimizer scalars, step, RNG state
    n_records  u32
    records    n_records times:
        name_len u16, name (UTF-8), dtype u8 (0 = f32, 1 = f64), ndim u8,
        extents u32[ndim], row-major payload

Parameter records are named ``param/<name>``, momentum buffers ``momentum/<name>``.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from odseg.network import NetworkConfig, SGDState, build

MAGIC = b"ODSC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    def __init__(self, reason, message):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


def _record(name, arr):
    arr = np.ascontiguousarray(arr)
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw
    head += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def encode(net, state: SGDState | None = None, rng_state=None, extra=None) -> bytes:
    meta = {"config": net.config.to_dict(), "rng_state": rng_state, "extra": extra or {}}
    if state is not None:
        meta["optimizer"] = {"total_steps": state.total_steps, "initial_lr": state.initial_lr,
                             "momentum": state.momentum, "clip_norm": state.clip_norm,
                             "step": state.step}
    records = [_record(f"param/{k}", v.data) for k, v in net.params.items()]
    if state is not None:
        records += [_record(f"momentum/{k}", v) for k, v in sorted(state.buffers.items())]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(records))]
    return b"".join(out + records)


class _Reader:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated", f"needed {n} bytes at offset {self.off}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes):
    """Return ``(network, optimizer state or None, meta dict)``."""
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError("bad_magic", f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError("version", f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        config = NetworkConfig(**meta["config"])
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError("meta", f"unreadable metadata block ({exc})") from None
    net = build(config, seed=0)
    state = None
    if "optimizer" in meta:
        state = SGDState(**meta["optimizer"])
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError("dtype", f"record {name!r} has dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        arr = np.frombuffer(r.take(int(np.prod(shape)) * dt.itemsize), dtype=dt).reshape(shape)
        kind, _, pname = name.partition("/")
        if pname not in net.params or kind not in ("param", "momentum"):
            raise CheckpointError("unknown_parameter", f"record {name!r} does not match the network")
        target = net.params[pname]
        if tuple(shape) != target.shape:
            raise CheckpointError("shape", f"record {name!r} has shape {shape}, "
                                           f"network expects {target.shape}")
        if kind == "param":
            target.data = arr.astype(target.dtype, copy=True)
            seen.add(pname)
        elif state is not None:
            state.buffers[pname] = arr.astype(target.dtype, copy=True)
    if r.off != len(buf):
        raise CheckpointError("trailing", f"{len(buf) - r.off} unexpected trailing bytes")
    missing = set(net.params) - seen
    if missing:
        raise CheckpointError("missing_parameter", f"no record for {sorted(missing)[:3]}")
    return net, state, meta


def save_checkpoint(net, state, path, rng_state=None, extra=None) -> None:
    data = encode(net, state, rng_state, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
