"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"SSAM1"
    count
    repeated count times:
        name_len, name (utf-8), ndim, dims..., float32 LE data

Integer metadata (epoch, config hash, rng state) is stored as float blocks
of 16-bit chunks, every one of which a float32 represents exactly.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SSAM1"
_U32 = struct.Struct("<I")


def int_to_chunks(value: int, n_chunks: int) -> np.ndarray:
    if value < 0 or value >= 1 << (16 * n_chunks):
        raise ValueError(f"{value} does not fit in {n_chunks} 16-bit chunks")
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(n_chunks)], dtype=np.float32)


def chunks_to_int(chunks) -> int:
    return sum(int(c) << (16 * i) for i, c in enumerate(np.asarray(chunks).ravel()))


def config_hash(text: str) -> int:
    """First 64 bits of sha256 of a canonical config rendering."""
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass
class Checkpoint:
    blocks: dict = field(default_factory=dict)   # name -> float32 ndarray
    epoch: int = 0
    config_hash: int = 0
    rng_state: dict | None = None                # numpy bit-generator state

    def prefixed(self, prefix: str) -> dict:
        """Blocks under ``prefix`` with the prefix removed."""
        return {k[len(prefix):]: v for k, v in self.blocks.items() if k.startswith(prefix)}

    def add(self, prefix: str, state: dict) -> None:
        for k, v in state.items():
            self.blocks[prefix + k] = np.asarray(v, dtype=np.float32)

    def _all_blocks(self) -> dict:
        out = dict(self.blocks)
        out["meta.epoch"] = int_to_chunks(self.epoch, 2)
        out["meta.config_hash"] = int_to_chunks(self.config_hash, 4)
        if self.rng_state is not None:
            st = self.rng_state["state"]
            out["meta.rng_state"] = int_to_chunks(st["state"], 8)
            out["meta.rng_inc"] = int_to_chunks(st["inc"], 8)
            out["meta.rng_extra"] = np.array([self.rng_state.get("has_uint32", 0),
                                              self.rng_state.get("uinteger", 0) & 0xFFFF,
                                              self.rng_state.get("uinteger", 0) >> 16], dtype=np.float32)
        return out

    def to_bytes(self) -> bytes:
        blocks = self._all_blocks()
        parts = [MAGIC, _U32.pack(len(blocks))]
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype="<f4")
            raw = name.encode("utf-8")
            parts.append(_U32.pack(len(raw)) + raw + _U32.pack(arr.ndim))
            parts.extend(_U32.pack(d) for d in arr.shape)
            parts.append(arr.tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:len(MAGIC)] != MAGIC:
            raise FormatError(f"bad checkpoint magic {buf[:len(MAGIC)]!r}", 0)
        pos = len(MAGIC)

        def u32():
            nonlocal pos
            if pos + 4 > len(buf):
                raise FormatError("truncated checkpoint", pos)
            (v,) = _U32.unpack_from(buf, pos)
            pos += 4
            return v

        blocks = {}
        for _ in range(u32()):
            n = u32()
            if pos + n > len(buf):
                raise FormatError("truncated block name", pos)
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            shape = tuple(u32() for _ in range(u32()))
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(buf):
                raise FormatError(f"truncated data for block {name}", pos)
            blocks[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
        if pos != len(buf):
            raise FormatError(f"{len(buf) - pos} trailing bytes", pos)

        ck = cls(epoch=chunks_to_int(blocks.pop("meta.epoch", [0])),
                 config_hash=chunks_to_int(blocks.pop("meta.config_hash", [0])))
        if "meta.rng_state" in blocks:
            extra = blocks.pop("meta.rng_extra")
            ck.rng_state = {"bit_generator": "PCG64",
                            "state": {"state": chunks_to_int(blocks.pop("meta.rng_state")),
                                      "inc": chunks_to_int(blocks.pop("meta.rng_inc"))},
                            "has_uint32": int(extra[0]), "uinteger": int(extra[1]) | (int(extra[2]) << 16)}
        ck.blocks = blocks
        return ck

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
