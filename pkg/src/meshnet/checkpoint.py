"""Binary checkpoint container (``.mnck``) and embeddings files.

Layout, little-endian:

    magic (4 bytes) | version u32 | count u32
    count x entry
    optimizer: lr f64 | momentum f64 | weight_decay f64 | count u32 | count x entry
    metadata: length u32 | UTF-8 JSON
    CRC32 u32 of every preceding byte

    entry: name length u32 | UTF-8 name | rank u32 | rank x dim u32 | f32 data
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import MeshNet, ModelConfig
from .optim import SGD, SgdState

CHECKPOINT_MAGIC = b"MNCK"
EMBEDDINGS_MAGIC = b"MNEM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Container:
    tensors: dict[str, np.ndarray]
    optimizer: SgdState | None = None
    meta: dict = field(default_factory=dict)


def _pack_entries(arrays: Mapping[str, np.ndarray]) -> list[bytes]:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out


def write_container(path: str | Path, magic: bytes, c: Container) -> None:
    chunks = [magic, struct.pack("<I", VERSION)]
    chunks += _pack_entries(c.tensors)
    opt = c.optimizer or SgdState(0.0, 0.0, 0.0)
    chunks.append(struct.pack("<ddd", opt.lr, opt.momentum, opt.weight_decay))
    chunks += _pack_entries(opt.velocity)
    meta = json.dumps(c.meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)) + meta)
    payload = b"".join(chunks)
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.blob):
            raise CheckpointError("truncated file")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def entries(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<I")
            try:
                name = self.take(nlen).decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError("bad tensor name") from None
            (rank,) = self.unpack("<I")
            shape = self.unpack(f"<{rank}I")
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def read_container(path: str | Path, magic: bytes) -> Container:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CheckpointError("truncated file")
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checksum mismatch")
    r = _Reader(payload)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    tensors = r.entries()
    lr, momentum, wd = r.unpack("<ddd")
    velocity = r.entries()
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode("utf-8"))
    if r.off != len(payload):
        raise CheckpointError("trailing bytes after metadata")
    return Container(tensors, SgdState(lr, momentum, wd, velocity), meta)


def save_checkpoint(path: str | Path, model: MeshNet, optimizer: SGD | None = None, **meta) -> None:
    meta = dict(meta, model_config=model.config.to_dict())
    state = optimizer.state if optimizer is not None else None
    write_container(path, CHECKPOINT_MAGIC, Container(model.state_arrays(), state, meta))


def load_checkpoint(path: str | Path) -> tuple[MeshNet, SgdState, dict]:
    c = read_container(path, CHECKPOINT_MAGIC)
    try:
        config = ModelConfig.from_dict(c.meta["model_config"])
    except KeyError:
        raise CheckpointError("checkpoint has no model config") from None
    model = MeshNet(config)
    model.load_state_arrays(c.tensors)
    return model, c.optimizer, c.meta


def write_embeddings(path: str | Path, embeddings: np.ndarray, labels: np.ndarray, **meta) -> None:
    tensors = {
        "embeddings": np.asarray(embeddings, dtype=np.float32),
        "labels": np.asarray(labels, dtype=np.float32),
    }
    write_container(path, EMBEDDINGS_MAGIC, Container(tensors, None, meta))


def read_embeddings(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    c = read_container(path, EMBEDDINGS_MAGIC)
    return c.tensors["embeddings"], c.tensors["labels"].astype(np.int64), c.meta
