"""USIK checkpoints: little-endian f64 tensors behind a small self-describing header.

Layout (all integers little-endian)::

    b"USIK"  u32 version
    str model_name  str config_hash  u64 seed
    u32 n_entries
    n_entries x [ str name  u32 ndim  ndim x u32 dim  prod(dims) x f64 ]

where ``str`` is a u32 byte length followed by utf-8 bytes.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbones import Backbone, build, parse_model_name

MAGIC = b"USIK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class ConfigHashMismatchWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    model_name: str
    config_hash: str
    seed: int
    entries: dict[str, np.ndarray]
    version: int = VERSION


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    parts += [_pack_str(ckpt.model_name), _pack_str(ckpt.config_hash), struct.pack("<Q", ckpt.seed)]
    parts.append(struct.pack("<I", len(ckpt.entries)))
    for name, arr in ckpt.entries.items():
        arr = np.asarray(arr, dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated {what} at byte offset {self.pos}: need {n} bytes, {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{what} is not valid utf-8") from exc


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}, expected {VERSION}")
    name = r.string("model name")
    config_hash = r.string("config hash")
    (seed,) = struct.unpack("<Q", r.take(8, "seed"))
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        key = r.string("entry name")
        ndim = r.u32(f"{key} ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{key} shape"))
        payload = r.take(math.prod(shape) * 8, f"{key} payload")
        entries[key] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after byte offset {r.pos}")
    return Checkpoint(name, config_hash, seed, entries, version)


def save_checkpoint(model: Backbone, path, config_hash: str = "", seed: int = 0) -> Checkpoint:
    ckpt = Checkpoint(model.name, config_hash, int(seed), {k: v.copy() for k, v in model.state_dict().items()})
    Path(path).write_bytes(encode(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def load_into(model: Backbone, ckpt: Checkpoint, expected_hash: str | None = None) -> Backbone:
    """Copy checkpoint tensors into ``model``; names must match exactly."""
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        warnings.warn(
            f"checkpoint config hash {ckpt.config_hash[:12]} differs from expected {expected_hash[:12]}",
            ConfigHashMismatchWarning,
            stacklevel=2,
        )
    if ckpt.model_name != model.name:
        own = model.state_dict()
        missing = [k for k in own if k not in ckpt.entries]
        raise CheckpointFormatError(
            f"checkpoint holds {ckpt.model_name!r}, model is {model.name!r}; missing keys {missing}"
        )
    model.load_state_dict(ckpt.entries)
    return model


def restore_model(ckpt: Checkpoint, expected_hash: str | None = None) -> Backbone:
    """Rebuild the backbone named in the checkpoint and load its tensors."""
    family, size, k, shape = parse_model_name(ckpt.model_name)
    model = build(family, size, k, shape)
    return load_into(model, ckpt, expected_hash)
