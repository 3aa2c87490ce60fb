"""Bit-exact binary checkpoints for parameter vectors and basis sets.

Layout (all integers little-endian):

    magic       4 bytes   b"FBAS"
    version     u32       currently 1
    kind        u8        0 = single parameter vector, 1 = basis set
    has_major   u8        basis sets only; 0 otherwise
    num_blocks  u32
    block table num_blocks x (name_len u32, name UTF-8, offset u64, length u64)
    array_count u32
    payload     array_count x total_length float64

For a basis set the K bases come first, then the major basis when present.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .basis import BasisSet
from .errors import DataError
from .nn import Block, ParamVector, validate_block_spec

MAGIC = b"FBAS"
VERSION = 1

KIND_PARAMS = 0
KIND_BASIS_SET = 1


def _pack_header(
    kind: int, has_major: bool, block_spec: tuple[Block, ...], array_count: int
) -> bytes:
    parts = [MAGIC, struct.pack("<IBBI", VERSION, kind, int(has_major), len(block_spec))]
    for b in block_spec:
        name = b.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<QQ", b.offset, b.length))
    parts.append(struct.pack("<I", array_count))
    return b"".join(parts)


def checkpoint_write(path, obj: ParamVector | BasisSet) -> None:
    if isinstance(obj, ParamVector):
        kind, has_major = KIND_PARAMS, False
        arrays = [obj.values]
        block_spec = obj.block_spec
    elif isinstance(obj, BasisSet):
        kind, has_major = KIND_BASIS_SET, obj.major is not None
        arrays = [b.values for b in obj.bases]
        if obj.major is not None:
            arrays.append(obj.major.values)
        block_spec = obj.block_spec
    else:
        raise DataError(f"cannot checkpoint object of type {type(obj).__name__}")

    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    Path(path).write_bytes(
        _pack_header(kind, has_major, block_spec, len(arrays)) + payload
    )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise DataError(
                f"checkpoint truncated: wanted {count} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_read(path) -> ParamVector | BasisSet:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise DataError("not a checkpoint file (bad magic bytes)")
    version, kind, has_major, num_blocks = reader.unpack("<IBBI")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    if kind not in (KIND_PARAMS, KIND_BASIS_SET):
        raise DataError(f"unknown checkpoint kind {kind}")

    blocks = []
    for _ in range(num_blocks):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        offset, length = reader.unpack("<QQ")
        blocks.append(Block(name, offset, length))
    total = sum(b.length for b in blocks)
    block_spec = validate_block_spec(blocks, total)

    (array_count,) = reader.unpack("<I")
    if array_count < 1:
        raise DataError("checkpoint holds no parameter arrays")
    if kind == KIND_PARAMS and (array_count != 1 or has_major):
        raise DataError("parameter-vector checkpoint must hold exactly one array")
    if kind == KIND_BASIS_SET and has_major and array_count < 2:
        raise DataError("basis-set checkpoint with major basis needs >= 2 arrays")

    arrays = []
    for _ in range(array_count):
        raw = reader.take(8 * total)
        arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64))
    if reader.pos != len(reader.data):
        raise DataError(
            f"checkpoint has {len(reader.data) - reader.pos} trailing bytes"
        )

    if kind == KIND_PARAMS:
        return ParamVector(arrays[0], block_spec)
    vectors = [ParamVector(a, block_spec) for a in arrays]
    if has_major:
        return BasisSet(tuple(vectors[:-1]), vectors[-1])
    return BasisSet(tuple(vectors), None)
