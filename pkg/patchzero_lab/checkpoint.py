"""
PZCK checkpoints (all integers little-endian):

    magic "PZCK" | u32 version | u32 kind length | kind bytes | u32 tensor count
    per tensor: u32 name length | name bytes | u32 rank | u32 dims... | f32 payload
    u32 CRC32 of every preceding byte
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .errors import BadMagicError, CheckpointError, ChecksumMismatchError, TruncatedFileError, UnsupportedVersionError
from .nn import ClassifierParams, DetectorParams, ModelParams
from .tensor import Tensor

logger = logging.getLogger(__name__)

_PARAMS_BY_KIND = {"classifier": ClassifierParams, "detector": DetectorParams}


def encode_checkpoint(params: ModelParams) -> bytes:
    kind = params.kind.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(kind)), kind, struct.pack("<I", len(params.tensors))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack(f"<I{tensor.ndim}I", tensor.ndim, *tensor.shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw: bytes, end: int) -> None:
        self.raw = raw
        self.end = end
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > self.end:
            raise TruncatedFileError(f"checkpoint ends at byte {self.end}, needed {self.pos + count}")
        chunk = self.raw[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> Tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))


def decode_checkpoint(raw: bytes) -> ModelParams:
    if len(raw) < 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a PZCK checkpoint (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise TruncatedFileError(f"checkpoint of {len(raw)} bytes is too short")
    body_end = len(raw) - 4
    (stored_crc,) = struct.unpack("<I", raw[body_end:])
    actual_crc = zlib.crc32(raw[:body_end])
    if stored_crc != actual_crc:
        raise ChecksumMismatchError(f"CRC32 mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")

    reader = _Reader(raw, body_end)
    reader.take(4)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version}, supported {CHECKPOINT_VERSION}")
    kind = reader.take(reader.u32()).decode("utf-8")
    if kind not in _PARAMS_BY_KIND:
        raise CheckpointError(f"unknown model kind {kind!r}")

    tensors: Dict[str, Tensor] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        dims = reader.u32s(reader.u32())
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = Tensor(payload, requires_grad=True, dtype=np.float32)
    if reader.pos != body_end:
        raise CheckpointError(f"{body_end - reader.pos} trailing bytes after the tensor table")
    return _PARAMS_BY_KIND[kind](kind=kind, tensors=tensors)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(encode_checkpoint(params))
    logger.info("Saved %s checkpoint (%d tensors) to %s", params.kind, len(params.tensors), path)


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    params = decode_checkpoint(path.read_bytes())
    logger.debug("Loaded %s checkpoint from %s", params.kind, path)
    return params
