"""Versioned binary checkpoint container with named float64 tensors.

Layout: magic, u32 version, metadata block (UTF-8 key/value pairs), tensor
records (name, dims, raw little-endian float64 data), sha256 of everything
before the trailing checksum. Tensors are written in sorted-name order so
equal contents always produce equal bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig

MAGIC = b"TGCK"
FORMAT_VERSION = 1
PROVENANCES = ("rl-pretrained", "lm-pretrained", "random")

_CONFIG_KEYS = ("d_model", "n_heads", "n_layers", "dropout", "max_positions")


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or version-incompatible checkpoint file."""


@dataclass(frozen=True)
class Checkpoint:
    params: dict[str, np.ndarray]
    config: BackboneConfig
    provenance: str
    meta: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")
        for key in self.meta:
            if key.startswith("config."):
                raise ValueError(f"metadata key {key!r} collides with the reserved config namespace")

    def names(self) -> list[str]:
        return sorted(self.params)


def _write_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    out += struct.pack("<I", len(raw))
    out += raw


def serialize_checkpoint(ckpt: Checkpoint) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", ckpt.version)

    meta = {"provenance": ckpt.provenance}
    for key in _CONFIG_KEYS:
        value = getattr(ckpt.config, key)
        meta[f"config.{key}"] = format(value, ".17g") if isinstance(value, float) else str(value)
    meta.update(ckpt.meta)
    out += struct.pack("<I", len(meta))
    for key in sorted(meta):
        _write_str(out, key)
        _write_str(out, meta[key])

    names = ckpt.names()
    out += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype=np.float64)
        _write_str(out, name)
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.astype("<f8", copy=False).tobytes()

    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt string field: {exc}") from exc


def deserialize_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")

    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")

    raw_meta: dict[str, str] = {}
    for _ in range(r.u32()):
        key = r.string()
        raw_meta[key] = r.string()
    try:
        provenance = raw_meta.pop("provenance")
        config = BackboneConfig(
            d_model=int(raw_meta.pop("config.d_model")),
            n_heads=int(raw_meta.pop("config.n_heads")),
            n_layers=int(raw_meta.pop("config.n_layers")),
            dropout=float(raw_meta.pop("config.dropout")),
            max_positions=int(raw_meta.pop("config.max_positions")),
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata missing {exc}") from exc

    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        if ndim > 8:
            raise CheckpointError(f"implausible tensor rank {ndim}")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        params[name] = data.astype(np.float64).copy()
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after tensor records")

    return Checkpoint(params=params, config=config, provenance=provenance, meta=raw_meta, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = serialize_checkpoint(ckpt)
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    return deserialize_checkpoint(blob)
