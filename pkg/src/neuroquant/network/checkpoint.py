"""Versioned binary container for :class:`NetworkParams`.

Layout (all integers little-endian)::

    b"NQCKPT\\x00\\x01"            magic
    u32 version
    u32 len, bytes                 network config as canonical JSON
    u32 tensor count
    per tensor:
        u16 len, bytes             name (utf-8)
        u8 trainable flag
        u8 ndim, u32 * ndim        shape
        float64 LE * prod(shape)   values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ConfigMismatch, TruncatedData, VersionMismatch
from .model import CHECKPOINT_VERSION, NetworkConfig, NetworkParams

MAGIC = b"NQCKPT\x00\x01"


def _config_json(cfg: NetworkConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(params: NetworkParams) -> bytes:
    params.check_finite()
    out = [MAGIC, struct.pack("<I", params.version)]
    cfg = _config_json(params.config)
    out += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params.tensors))]
    trainable = set(params.trainable)
    for name in params.tensors:
        arr = np.asarray(params.tensors[name], dtype="<f8")
        key = name.encode()
        out += [struct.pack("<H", len(key)), key, struct.pack("<BB", name in trainable, arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes(order="C")]
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedData(f"checkpoint ends at byte {len(self.raw)}, needed {self.pos + n}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(raw: bytes, expected: NetworkConfig | None = None) -> NetworkParams:
    """Parse :func:`save_checkpoint` output.

    With ``expected`` given, a checkpoint built for a different network
    configuration raises :class:`ConfigMismatch`.
    """
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise BadMagic("not a neuroquant checkpoint")
    r = _Reader(raw)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (n,) = r.unpack("<I")
    cfg_dict = json.loads(r.take(n).decode())
    config = NetworkConfig.from_dict(cfg_dict)
    if expected is not None and _config_json(expected) != _config_json(config):
        raise ConfigMismatch(f"checkpoint config {cfg_dict} differs from expected {expected.to_dict()}")
    (count,) = r.unpack("<I")
    tensors, trainable = {}, []
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        flag, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if flag:
            trainable.append(name)
    if r.pos != len(raw):
        raise TruncatedData(f"{len(raw) - r.pos} trailing bytes after the last tensor")
    return NetworkParams(config, tensors, tuple(trainable), version)


def write_checkpoint(params: NetworkParams, path) -> Path:
    path = Path(path)
    path.write_bytes(save_checkpoint(params))
    return path


def read_checkpoint(path, expected: NetworkConfig | None = None) -> NetworkParams:
    return load_checkpoint(Path(path).read_bytes(), expected)
