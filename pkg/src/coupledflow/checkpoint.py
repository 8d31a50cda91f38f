"""Binary checkpoint format.

Layout (all little-endian)::

    b"SCFL"                     magic
    u32                         format version
    u64 n, i64[n]               layer widths
    u64 n, f64[n]               parameters
    u64 n, f64[n]               EMA parameters
    u64 n, f64[n]               Adam first moment
    u64 n, f64[n]               Adam second moment
    i64                         Adam step
    f64 x4                      lr, beta1, beta2, eps
    i64                         iteration count
    u64 n, bytes[n]             config hash (ASCII)
    i64                         rng seed
    u32                         CRC-32 of everything above
"""

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .exceptions import CheckpointError
from .numeric_core import AdamState, VelocityNet
from .training import TrainState

MAGIC = b"SCFL"
VERSION = 1


@dataclass
class Checkpoint:
    widths: tuple
    state: TrainState
    config_hash: str
    seed: int

    @property
    def iteration(self):
        return self.state.iteration

    def net(self, ema=False):
        return VelocityNet.from_widths(self.widths, (self.state.ema_params if ema else self.state.params).copy())


def _pack_array(buf, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    buf += struct.pack("<Q", arr.size)
    buf += arr.tobytes()


def encode_checkpoint(ckpt):
    s = ckpt.state
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    _pack_array(buf, np.array(ckpt.widths), "<i8")
    for arr in (s.params, s.ema_params, s.adam.m, s.adam.v):
        _pack_array(buf, arr, "<f8")
    buf += struct.pack("<q", s.adam.step)
    buf += struct.pack("<4d", s.adam.lr, s.adam.beta1, s.adam.beta2, s.adam.eps)
    buf += struct.pack("<q", s.iteration)
    digest = ckpt.config_hash.encode("ascii")
    buf += struct.pack("<Q", len(digest)) + digest
    buf += struct.pack("<q", ckpt.seed)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, field):
        if self.pos + n > len(self.data):
            raise CheckpointError("file is truncated", field)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, field):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def array(self, dtype, field):
        (n,) = self.unpack("<Q", field)
        itemsize = np.dtype(dtype).itemsize
        if n > (len(self.data) - self.pos) // itemsize:
            raise CheckpointError("file is truncated", field)
        return np.frombuffer(self.take(n * itemsize, field), dtype=dtype).astype(dtype[1:] if dtype[0] == "<" else dtype)


def decode_checkpoint(data, expected_hash=None):
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic tag", "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", "version")
    widths = tuple(int(w) for w in r.array("<i8", "widths"))
    params = r.array("<f8", "params")
    ema = r.array("<f8", "ema_params")
    m = r.array("<f8", "adam_m")
    v = r.array("<f8", "adam_v")
    (step,) = r.unpack("<q", "adam_step")
    lr, b1, b2, eps = r.unpack("<4d", "adam_hyper")
    (iteration,) = r.unpack("<q", "iteration")
    (hlen,) = r.unpack("<Q", "config_hash")
    digest = r.take(hlen, "config_hash").decode("ascii", errors="replace")
    (seed,) = r.unpack("<q", "seed")
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checksum", "checksum")
    if zlib.crc32(data[:body_end]) != crc:
        raise CheckpointError("checksum mismatch", "checksum")
    try:
        net = VelocityNet.from_widths(widths)
    except Exception as exc:
        raise CheckpointError(str(exc), "widths") from None
    for name, arr in (("params", params), ("ema_params", ema), ("adam_m", m), ("adam_v", v)):
        if arr.shape != (net.n_params,):
            raise CheckpointError(f"length {arr.size} does not match widths {widths}", name)
    if expected_hash is not None and digest != expected_hash:
        raise CheckpointError(f"config hash {digest} does not match {expected_hash}", "config_hash")
    adam = AdamState(m, v, step=step, lr=lr, beta1=b1, beta2=b2, eps=eps)
    return Checkpoint(widths, TrainState(params, ema, adam, iteration), digest, seed)


def save_checkpoint(path, ckpt):
    data = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expected_hash=None):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expected_hash)
