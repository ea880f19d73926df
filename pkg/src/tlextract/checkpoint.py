"""Typed weight tensors and the WBIN bit-exact checkpoint file format.

WBIN layout (all integers little-endian):

    magic "WBN1"
    u32 tensor_count | u32 metadata_count
    metadata_count x (u16 key_len, key, u16 val_len, val)     # order kept
    tensor_count x (u16 name_len, name, u8 dtype, u8 rank,
                    u32 dims[rank], raw LE payload)
    u32 CRC-32 over the concatenated payload bytes

dtype codes: 0 = f32, 1 = f16, 2 = bf16.  In memory every tensor holds
float32 values; narrower formats are stored exactly (each value is
representable) and re-expanded on read, so a write/read cycle is
byte-identical.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    DuplicateTensorError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from .floatbits import BF16, F16, F32, FloatFormat, quantize_array

_MAGIC = b"WBN1"
_DTYPE_CODE = {"f32": 0, "f16": 1, "bf16": 2}
_CODE_DTYPE = {0: F32, 1: F16, 2: BF16}

REQUIRED_METADATA = ("vendor", "framework", "arch")


@dataclass
class WeightTensor:
    name: str
    data: np.ndarray  # float32, shape == dims
    format: FloatFormat = F32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def payload(self) -> bytes:
        """Raw little-endian payload in the tensor's storage format."""
        if self.format.name == "f32":
            return self.data.astype("<f4").tobytes()
        if self.format.name == "f16":
            return self.data.astype("<f2").tobytes()
        u = self.data.astype("<f4").view(np.uint32)
        return (u >> np.uint32(16)).astype("<u2").tobytes()


@dataclass
class Checkpoint:
    tensors: list[WeightTensor] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DuplicateTensorError(f"duplicate tensor name(s): {dup}")
        missing = [k for k in REQUIRED_METADATA if k not in self.metadata]
        if missing:
            raise ShapeMismatchError(
                f"checkpoint metadata missing required key(s): {missing}",
                code="metadata-missing",
            )

    def tensor(self, name: str) -> WeightTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]


def write_wbin(ckpt: Checkpoint, path) -> None:
    head = [_MAGIC, struct.pack("<II", len(ckpt.tensors), len(ckpt.metadata))]
    for k, v in ckpt.metadata.items():
        kb, vb = k.encode("utf-8"), v.encode("utf-8")
        head.append(struct.pack("<H", len(kb)) + kb + struct.pack("<H", len(vb)) + vb)
    crc = 0
    for t in ckpt.tensors:
        nb = t.name.encode("utf-8")
        head.append(struct.pack("<H", len(nb)) + nb)
        head.append(struct.pack("<BB", _DTYPE_CODE[t.format.name], t.data.ndim))
        head.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        payload = t.payload()
        head.append(payload)
        crc = zlib.crc32(payload, crc)
    head.append(struct.pack("<I", crc & 0xFFFFFFFF))
    with open(path, "wb") as fh:
        fh.write(b"".join(head))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"file ends {self.pos + n - len(self.buf)} byte(s) early"
            )
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def read_wbin(path) -> Checkpoint:
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    if cur.take(4) != _MAGIC:
        raise BadMagicError(f"not a WBIN file: {path}")
    n_tensors, n_meta = cur.u32(), cur.u32()
    metadata = {}
    for _ in range(n_meta):
        key = cur.take(cur.u16()).decode("utf-8")
        metadata[key] = cur.take(cur.u16()).decode("utf-8")
    tensors = []
    seen = set()
    crc = 0
    for _ in range(n_tensors):
        name = cur.take(cur.u16()).decode("utf-8")
        if name in seen:
            raise DuplicateTensorError(f"duplicate tensor name: {name!r}")
        seen.add(name)
        code, rank = cur.u8(), cur.u8()
        if code not in _CODE_DTYPE:
            raise TruncatedPayloadError(f"unknown dtype code {code}")
        fmt = _CODE_DTYPE[code]
        dims = struct.unpack(f"<{rank}I", cur.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = cur.take(count * (fmt.width // 8))
        crc = zlib.crc32(payload, crc)
        if fmt.name == "f32":
            data = np.frombuffer(payload, dtype="<f4").astype(np.float32)
        elif fmt.name == "f16":
            data = np.frombuffer(payload, dtype="<f2").astype(np.float32)
        else:
            u = np.frombuffer(payload, dtype="<u2").astype(np.uint32)
            data = (u << np.uint32(16)).view(np.float32)
        tensors.append(WeightTensor(name, data.reshape(dims), fmt))
    stored = cur.u32()
    if stored != (crc & 0xFFFFFFFF):
        raise ChecksumError(
            f"payload checksum mismatch: stored {stored:#010x}, "
            f"computed {crc & 0xFFFFFFFF:#010x}"
        )
    return Checkpoint(tensors, metadata)


def quantize_checkpoint(ckpt: Checkpoint, target: FloatFormat) -> Checkpoint:
    """Round-to-nearest-even every tensor into ``target``, saturating.

    Source must be f32.  The result's metadata records the target format and
    how many values hit the saturation cap.
    """
    for t in ckpt.tensors:
        if t.format.name != "f32":
            raise ShapeMismatchError(
                f"can only quantize f32 checkpoints, {t.name} is {t.format.name}",
                code="bad-source-format",
            )
    out = []
    saturated = 0
    for t in ckpt.tensors:
        q, sat = quantize_array(t.data.reshape(-1), target)
        saturated += sat
        out.append(WeightTensor(t.name, q.reshape(t.data.shape), target))
    md = dict(ckpt.metadata)
    md["quant"] = target.name
    md["quant_saturated"] = str(saturated)
    return Checkpoint(out, md)
