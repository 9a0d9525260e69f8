"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FUSECKPT"  u32 version
    u32 meta_len, meta (UTF-8 JSON, sorted keys)
    u32 entry_count
    per entry: u16 name_len, name, u16 group_len, group, u8 trainable,
               u8 dtype tag, u8 ndim, u32 dims[ndim], raw scalars
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoders import EncoderConfig
from .models import FuseModel, param_group

MAGIC = b"FUSECKPT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
DTYPE_TAGS = {v: k for k, v in DTYPES.items()}
OPTIMIZER_GROUP = "optimizer"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    meta: dict
    tensors: dict[str, np.ndarray]
    groups: dict[str, str]
    trainable_groups: frozenset = frozenset()
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    # -- serialization -------------------------------------------------
    def to_bytes(self) -> bytes:
        meta = dict(self.meta)
        meta["trainable_groups"] = sorted(self.trainable_groups)
        meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
        entries = [(n, self.groups[n], a) for n, a in self.tensors.items()]
        entries += [(n, OPTIMIZER_GROUP, a) for n, a in self.optimizer.items()]
        parts.append(struct.pack("<I", len(entries)))
        for name, group, arr in entries:
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in DTYPE_TAGS:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            nb, gb = name.encode(), group.encode()
            parts += [
                struct.pack("<H", len(nb)), nb,
                struct.pack("<H", len(gb)), gb,
                struct.pack("<BBB", int(group in self.trainable_groups), DTYPE_TAGS[dt], arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape),
                np.ascontiguousarray(arr, dtype=dt).tobytes(),
            ]
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelCheckpoint":
        if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a FUSE checkpoint (bad magic)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("CRC mismatch: checkpoint is corrupt")
        pos = len(MAGIC)

        def take(fmt):
            nonlocal pos
            vals = struct.unpack_from(fmt, body, pos)
            pos += struct.calcsize(fmt)
            return vals

        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = take("<I")
        meta = json.loads(body[pos : pos + meta_len])
        pos += meta_len
        trainable = frozenset(meta.pop("trainable_groups", []))
        tensors, groups, optimizer = {}, {}, {}
        (count,) = take("<I")
        for _ in range(count):
            (nl,) = take("<H")
            name = body[pos : pos + nl].decode()
            pos += nl
            (gl,) = take("<H")
            group = body[pos : pos + gl].decode()
            pos += gl
            _, tag, ndim = take("<BBB")
            shape = take(f"<{ndim}I")
            dt = DTYPES[tag]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dt, count=n, offset=pos).reshape(shape).copy()
            pos += n * dt.itemsize
            if group == OPTIMIZER_GROUP:
                optimizer[name] = arr
            else:
                tensors[name] = arr
                groups[name] = group
        if pos != len(body):
            raise CheckpointError(f"{len(body) - pos} trailing bytes before CRC")
        return cls(meta, tensors, groups, trainable, optimizer)

    def save(self, path: str | os.PathLike) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())

    # -- model conversion ----------------------------------------------
    @classmethod
    def from_model(
        cls,
        model: FuseModel,
        meta: dict | None = None,
        trainable_groups=(),
        optimizer: torch.optim.Optimizer | None = None,
    ) -> "ModelCheckpoint":
        meta = dict(meta or {})
        meta["model"] = model_meta(model)
        tensors, groups = {}, {}
        for name, p in model.named_parameters():
            tensors[name] = p.detach().cpu().numpy().copy()
            groups[name] = param_group(name)
        opt = optimizer_state(model, optimizer) if optimizer is not None else {}
        if optimizer is not None:
            meta["optimizer_step"] = _adam_step(optimizer)
        return cls(meta, tensors, groups, frozenset(trainable_groups), opt)

    def build_model(self) -> FuseModel:
        model = model_from_meta(self.meta["model"])
        state = {k: torch.from_numpy(v) for k, v in self.tensors.items()}
        missing = set(dict(model.named_parameters())) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        with torch.no_grad():
            for name, p in model.named_parameters():
                src = state[name]
                if tuple(src.shape) != tuple(p.shape):
                    raise CheckpointError(f"{name}: shape {tuple(src.shape)} vs model {tuple(p.shape)}")
                p.copy_(src.to(p.dtype))
        return model

    def group_hashes(self) -> dict[str, str]:
        out = {}
        for name, arr in self.tensors.items():
            h = out.setdefault(self.groups[name], hashlib.sha256())
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return {g: h.hexdigest() for g, h in sorted(out.items())}


def model_meta(model: FuseModel) -> dict:
    lora = None
    if model.event_encoder is not None and model.event_encoder.has_lora:
        q = model.event_encoder.blocks[0].attn.q
        lora = {"rank": int(q.lora_A.shape[0]), "alpha": float(q.lora_scale * q.lora_A.shape[0])}
    fusion = {}
    if model.fusion_kind == "fredfuse":
        f = model.fusion
        fusion = {"levels": f.levels, "groups": f.low_image.groups, "heads": f.attn_high.heads}
    elif model.fusion_kind == "attention":
        fusion = {"heads": model.fusion.image_query.heads}
    return {
        "config": model.config.to_dict(),
        "fusion": model.fusion_kind,
        "fusion_params": fusion,
        "event_encoder": model.event_encoder is not None,
        "lora": lora,
    }


def model_from_meta(meta: dict) -> FuseModel:
    fp = meta.get("fusion_params") or {}
    model = FuseModel(
        EncoderConfig.from_dict(meta["config"]),
        fusion=meta["fusion"],
        event_encoder=meta["event_encoder"],
        levels=fp.get("levels", 3),
        groups=fp.get("groups", 4),
        fusion_heads=fp.get("heads", 4),
    )
    if meta.get("lora"):
        model.event_encoder.attach_lora(meta["lora"]["rank"], meta["lora"]["alpha"])
    return model


def _adam_step(optimizer: torch.optim.Optimizer) -> int:
    for state in optimizer.state.values():
        return int(state["step"])
    return 0


def optimizer_state(model: FuseModel, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, state in optimizer.state.items():
        name = names[id(p)]
        out[f"exp_avg/{name}"] = state["exp_avg"].detach().cpu().numpy().copy()
        out[f"exp_avg_sq/{name}"] = state["exp_avg_sq"].detach().cpu().numpy().copy()
    return dict(sorted(out.items()))


def restore_optimizer(ckpt: ModelCheckpoint, model: FuseModel, optimizer: torch.optim.Optimizer) -> None:
    step = ckpt.meta.get("optimizer_step", 0)
    if not ckpt.optimizer or not step:
        return
    params = dict(model.named_parameters())
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = next(n for n, q in params.items() if q is p)
            optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(ckpt.optimizer[f"exp_avg/{name}"]).to(p.dtype).clone(),
                "exp_avg_sq": torch.from_numpy(ckpt.optimizer[f"exp_avg_sq/{name}"]).to(p.dtype).clone(),
            }
