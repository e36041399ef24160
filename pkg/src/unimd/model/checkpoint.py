"""Checkpoint file::

    b"UMDC" | u32 version=1 | 32-byte sha256 of the model config | u32 param count
    | per param: u16 n | n bytes name | u8 ndim | ndim x u32 extent | f64 payload

All integers little-endian; parameters in declaration order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .network import ModelConfig, UniMD

MAGIC = b"UMDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


def config_hash(cfg: ModelConfig) -> bytes:
    """Digest of the architecture; the init seed is left out."""
    arch = {k: v for k, v in cfg.to_dict().items() if k != "seed"}
    blob = json.dumps(arch, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).digest()


def checkpoint_bytes(model: UniMD) -> bytes:
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<I", VERSION), config_hash(model.cfg), struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: UniMD, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = take(32)
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    return digest, params


def load_checkpoint(model: UniMD, path) -> None:
    """Copy parameters from ``path`` into ``model``; the architectures must match exactly."""
    digest, params = read_checkpoint(path)
    own = dict(model.named_parameters())
    if digest != config_hash(model.cfg):
        mismatched = sorted(k for k in own if k in params and params[k].shape != own[k].shape)
        detail = f" (e.g. {mismatched[0]}: {params[mismatched[0]].shape} vs {own[mismatched[0]].shape})" if mismatched else ""
        raise ArchitectureMismatch(f"{path}: checkpoint was written for a different model config{detail}")
    if set(own) != set(params):
        raise ArchitectureMismatch(f"{path}: parameter names differ from the model")
    for name, p in own.items():
        if params[name].shape != p.shape:
            raise ArchitectureMismatch(f"{path}: {name} has shape {params[name].shape}, model {p.shape}")
        p.data[...] = params[name]
