"""Binary little-endian checkpoint format.

Layout::

    magic       8 bytes  b"RQENCKPT"
    version     u32
    config      height, width, in_channels, n_stages (u32 each),
                widths[n_stages] (u32), pool[n_stages] (u8),
                early_tap, late_tap, quality_hidden, kernel (u32), l2_normalize (u8)
    layout      b1, b2 (f64)
    model       region mask (u32 length + ascii), quality_fixed (u8),
                n_classes (u32) then per class u32 length + utf-8 name
    params      count (u32), then per parameter:
                name length (u32), utf-8 name, rank (u32), extents (u32 each),
                values (f64, row-major)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .model import RQEN, BackboneConfig
from .regions import RegionLayout

MAGIC = b"RQENCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(buf: io.BytesIO, v: int) -> None:
    buf.write(struct.pack("<I", v))


def _str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    _u32(buf, len(raw))
    buf.write(raw)


def dumps(model: RQEN) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _u32(buf, VERSION)
    c = model.config
    for v in (c.height, c.width, c.in_channels, len(c.widths)):
        _u32(buf, v)
    for w in c.widths:
        _u32(buf, w)
    buf.write(bytes(int(p) for p in c.pool))
    for v in (c.early_tap, c.late_tap, c.quality_hidden, c.kernel):
        _u32(buf, v)
    buf.write(bytes([int(c.l2_normalize)]))
    buf.write(struct.pack("<2d", model.layout.b1, model.layout.b2))
    _str(buf, "".join(model.regions))
    buf.write(bytes([int(model.quality_fixed)]))
    _u32(buf, len(model.classes))
    for name in model.classes:
        _str(buf, name)
    _u32(buf, len(model.params))
    for name, arr in model.params.items():
        _str(buf, name)
        _u32(buf, arr.ndim)
        for e in arr.shape:
            _u32(buf, e)
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def loads(data: bytes) -> RQEN:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an RQEN checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    height, width, in_channels, n_stages = (r.u32() for _ in range(4))
    widths = tuple(r.u32() for _ in range(n_stages))
    pool = tuple(bool(r.u8()) for _ in range(n_stages))
    early, late, hidden, kernel = (r.u32() for _ in range(4))
    l2 = bool(r.u8())
    config = BackboneConfig(height, width, in_channels, widths, pool, early, late, hidden, kernel, l2)
    b1, b2 = struct.unpack("<2d", r.take(16))
    layout = RegionLayout(b1, b2)
    regions = tuple(r.str())
    quality_fixed = bool(r.u8())
    classes = tuple(r.str() for _ in range(r.u32()))
    store = ParamStore()
    for _ in range(r.u32()):
        name = r.str()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        store.add(name, values)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after parameter table")
    return RQEN(store, config, layout, regions, quality_fixed, classes)


def save(model: RQEN, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> RQEN:
    return loads(Path(path).read_bytes())
