"""Binary checkpoint format.

Little-endian layout::

    magic           4 bytes b"LTMP"
    version         u32
    config          image_size, patch_size, in_chans, embed_dim, heads, blocks  (u32 x 6)
                    mlp_ratio (f64), classes (u32)
                    reduction_order, importance_score (u8 x 2, index into the enum tuples)
                    topk (u32), merge_mode (u8)
    n_params        u32
    per parameter   name_len (u16), name (utf-8), ndim (u8), dims (u32 x ndim), data (f64)
    thresholds      blocks (u32), tau (f64), merge (f64 x blocks), prune (f64 x blocks)
    metadata        length (u32), JSON text (utf-8, sorted keys)

Parameters appear in module declaration order; thresholds are stored
separately after them.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import IMPORTANCE_SCORES, MERGE_MODES, REDUCTION_ORDERS, LTMPViT, ModelConfig

MAGIC = b"LTMP"
VERSION = 1
_CFG = struct.Struct("<IIIIIIdIBBIB")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    theta_merge: np.ndarray
    theta_prune: np.ndarray
    tau: float = 0.1
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: LTMPViT, metadata: dict | None = None) -> "Checkpoint":
        params = {n: p.detach().to(torch.float64).numpy().copy() for n, p in model.backbone_parameters()}
        return cls(
            config=model.cfg,
            params=params,
            theta_merge=model.thresholds.merge.detach().to(torch.float64).numpy().copy(),
            theta_prune=model.thresholds.prune.detach().to(torch.float64).numpy().copy(),
            tau=model.thresholds.tau,
            metadata=dict(metadata or {}),
        )

    def to_model(self, dtype=torch.float64, **cfg_overrides) -> LTMPViT:
        cfg = self.config.replace(**cfg_overrides) if cfg_overrides else self.config
        model = LTMPViT(cfg, tau=self.tau, dtype=dtype)
        named = dict(model.backbone_parameters())
        if set(named) != set(self.params):
            raise ValueError("checkpoint parameters do not match the model layout")
        with torch.no_grad():
            for name, p in named.items():
                p.copy_(torch.from_numpy(self.params[name]))
            model.thresholds.merge.copy_(torch.from_numpy(self.theta_merge))
            model.thresholds.prune.copy_(torch.from_numpy(self.theta_prune))
        return model

    def backbone_digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def model_digest(model: LTMPViT) -> str:
    return Checkpoint.from_model(model).backbone_digest()


def encode(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    out = bytearray()
    out += MAGIC + struct.pack("<I", VERSION)
    out += _CFG.pack(
        cfg.image_size, cfg.patch_size, cfg.in_chans, cfg.embed_dim, cfg.heads, cfg.blocks,
        float(cfg.mlp_ratio), cfg.classes,
        REDUCTION_ORDERS.index(cfg.reduction_order), IMPORTANCE_SCORES.index(cfg.importance_score),
        cfg.topk, MERGE_MODES.index(cfg.merge_mode),
    )
    out += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    blocks = len(ckpt.theta_merge)
    out += struct.pack("<Id", blocks, float(ckpt.tau))
    out += np.ascontiguousarray(ckpt.theta_merge, dtype="<f8").tobytes()
    out += np.ascontiguousarray(ckpt.theta_prune, dtype="<f8").tobytes()
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    return bytes(out)


def decode(raw: bytes) -> Checkpoint:
    try:
        return _decode(raw)
    except struct.error:
        raise ValueError("truncated checkpoint") from None


def _decode(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise ValueError(f"not a checkpoint (magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    f = _CFG.unpack_from(raw, pos)
    pos += _CFG.size
    cfg = ModelConfig(
        image_size=f[0], patch_size=f[1], in_chans=f[2], embed_dim=f[3], heads=f[4], blocks=f[5],
        mlp_ratio=f[6], classes=f[7], reduction_order=REDUCTION_ORDERS[f[8]],
        importance_score=IMPORTANCE_SCORES[f[9]], topk=f[10], merge_mode=MERGE_MODES[f[11]],
    )
    (n_params,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    blocks, tau = struct.unpack_from("<Id", raw, pos)
    pos += 12
    merge = np.frombuffer(raw, dtype="<f8", count=blocks, offset=pos).astype(np.float64)
    pos += 8 * blocks
    prune = np.frombuffer(raw, dtype="<f8", count=blocks, offset=pos).astype(np.float64)
    pos += 8 * blocks
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    metadata = json.loads(raw[pos:pos + mlen].decode("utf-8"))
    pos += mlen
    if pos != len(raw):
        raise ValueError(f"{len(raw) - pos} trailing bytes after checkpoint")
    return Checkpoint(cfg, params, merge, prune, tau, metadata)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(encode(ckpt))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
