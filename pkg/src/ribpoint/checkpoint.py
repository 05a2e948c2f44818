"""Checkpoint container "RCKP".

Layout (little-endian): magic ``RCKP``, u16 version, u32-length-prefixed
canonical-JSON config snapshot, u32 tensor count, per tensor (u16 name
length + UTF-8 name, u8 rank, u64 dims, f32 payload), u8 optimizer-state
flag (if set: u64 step count, then per tensor f32 first/second moments in
the same order), and a CRC32 trailer over everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from . import autodiff as ad
from .errors import FormatError, UnsupportedFeatureError
from .nn import ModelParams, NetworkConfig

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"RCKP"
_VERSION = 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    out = struct.pack("<H", len(nb)) + nb
    out += struct.pack("<B", arr.ndim)
    out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    out += arr.astype("<f4", copy=False).tobytes(order="C")
    return out


def save_checkpoint(model: ModelParams, path) -> None:
    snap = {
        "network": model.config.to_json_dict(),
        "norm_convention": model.norm_convention,
    }
    cfg_blob = json.dumps(snap, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = [n for n, _ in model.named()]
    body = _MAGIC + struct.pack("<H", _VERSION)
    body += struct.pack("<I", len(cfg_blob)) + cfg_blob
    body += struct.pack("<I", len(names))
    for n in names:
        body += _pack_tensor(n, model.params[n].data)
    has_opt = bool(model.opt_m) and set(model.opt_m) == set(names)
    body += struct.pack("<B", 1 if has_opt else 0)
    if has_opt:
        body += struct.pack("<Q", model.opt_step)
        for n in names:
            body += model.opt_m[n].astype("<f4", copy=False).tobytes(order="C")
        for n in names:
            body += model.opt_v[n].astype("<f4", copy=False).tobytes(order="C")
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14:
        raise FormatError("checkpoint truncated", offset=len(blob))
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError("checkpoint CRC mismatch (corrupted file)",
                          offset=len(blob) - 4)
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}", offset=0)
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _VERSION:
        raise UnsupportedFeatureError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 6)
    pos = 10
    snap = json.loads(blob[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    cfg = NetworkConfig.from_json_dict(snap["network"])
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params: dict[str, ad.Tensor] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = blob[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
        pos += 4 * size
        params[name] = ad.Tensor(arr.reshape(dims).astype(np.float32),
                                 requires_grad=True)
        shapes.append((name, tuple(int(d) for d in dims)))
    has_opt = blob[pos]
    pos += 1
    model = ModelParams(params=params, config=cfg,
                        norm_convention=snap["norm_convention"])
    if has_opt:
        (step,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        model.opt_step = int(step)
        for name, dims in shapes:
            size = int(np.prod(dims)) if dims else 1
            model.opt_m[name] = np.frombuffer(
                blob, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
        for name, dims in shapes:
            size = int(np.prod(dims)) if dims else 1
            model.opt_v[name] = np.frombuffer(
                blob, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    return model
