"""``GHCK`` checkpoint container.

Layout (little-endian): magic ``GHCK``, version u8, config text (u32 length +
utf-8), step u64, sigma(g) f64 (NaN when the model has no gate), then three
tables: parameters (f4), template buffers (f8) and optimizer moments (f4, may
be empty).  Each table is a u32 count followed by entries of name (u16 length
+ utf-8), rank u8, extents u32 each, raw data.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .hand_model import HandTemplate

MAGIC = b"GHCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def _write_table(buf: io.BytesIO, table: dict[str, np.ndarray], dtype: str) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        enc = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        buf.write(struct.pack("<H", len(enc)) + enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_table(buf: bytes, off: int, dtype: str) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    table: dict[str, np.ndarray] = {}
    item = np.dtype(dtype).itemsize
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + n].decode("utf-8")
        off += 2 + n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        if name in table:
            raise CheckpointFormatError(f"duplicate entry {name!r}")
        table[name] = np.frombuffer(buf, dtype=dtype, count=size, offset=off).reshape(shape).copy()
        off += size * item
    return table, off


@dataclass
class Checkpoint:
    config_text: str
    step: int
    sigma_g: float
    params: dict[str, np.ndarray]                       # float32
    buffers: dict[str, np.ndarray] = field(default_factory=dict)   # float64
    moments: dict[str, np.ndarray] = field(default_factory=dict)   # float32, "m.<name>" / "v.<name>"

    @property
    def config(self) -> config_mod.Config:
        return config_mod.parse(self.config_text)

    @classmethod
    def from_model(cls, model, cfg: config_mod.Config, step: int, optimizer=None) -> "Checkpoint":
        params = {k: p.data.astype("<f4") for k, p in model.named_parameters()}
        sigma = model.sigma_g()
        moments = {}
        if optimizer is not None:
            for k in params:
                moments[f"m.{k}"] = optimizer.m[k].astype("<f4")
                moments[f"v.{k}"] = optimizer.v[k].astype("<f4")
        buffers = {f"template.{k}": v for k, v in model.template.arrays().items()}
        return cls(config_mod.dumps(cfg), step, math.nan if sigma is None else sigma, params,
                   buffers, moments)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self.params.items()}

    def template(self) -> HandTemplate | None:
        arrays = {k.split(".", 1)[1]: v for k, v in self.buffers.items() if k.startswith("template.")}
        return HandTemplate.from_arrays(arrays) if arrays else None

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<B", VERSION))
        text = self.config_text.encode("utf-8")
        buf.write(struct.pack("<I", len(text)) + text)
        buf.write(struct.pack("<Qd", self.step, self.sigma_g))
        _write_table(buf, self.params, "<f4")
        _write_table(buf, self.buffers, "<f8")
        _write_table(buf, self.moments, "<f4")
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
        (version,) = struct.unpack_from("<B", buf, 4)
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", buf, 5)
        off = 9
        text = buf[off:off + n].decode("utf-8")
        off += n
        step, sigma = struct.unpack_from("<Qd", buf, off)
        off += 16
        params, off = _read_table(buf, off, "<f4")
        buffers, off = _read_table(buf, off, "<f8")
        moments, off = _read_table(buf, off, "<f4")
        if off != len(buf):
            raise CheckpointFormatError(f"{len(buf) - off} trailing bytes")
        return cls(text, step, sigma, params, buffers, moments)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
