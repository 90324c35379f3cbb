"""Versioned binary checkpoints with separable backbone / head sections.

Layout (little-endian)::

    "NBFC" | u32 version | u32 section count
    section: u16 label length | label utf-8 | u32 record count | records
    record:  u64 byte length | body
      tensor body: u16 name length | name | u8 dtype tag | u8 ndim | u64 * ndim shape | payload
      meta body:   u16 key length | key | u32 value length | value utf-8

Sections: ``backbone``, ``head:<dataset>`` (projection weights plus the
``stat.mean`` / ``stat.std`` standardization vectors), ``optim`` and ``meta``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import ParamStore
from .model import ModelConfig, NBFRec, ProjectionHead

MAGIC = b"NBFC"
VERSION = 1

_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_TAGS = {v: k for k, v in _DTYPES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    backbone: dict[str, torch.Tensor]
    heads: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    optim: dict[str, torch.Tensor] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: NBFRec, heads: dict[str, ProjectionHead] | None = None, meta: dict | None = None, optim=None):
        return cls(
            model.cfg,
            model.backbone.state_dict(),
            {name: head_tensors(h) for name, h in (heads or {}).items()},
            optim,
            {k: v if isinstance(v, str) else json.dumps(v) for k, v in (meta or {}).items()},
        )

    def model(self) -> NBFRec:
        return NBFRec(self.config, ParamStore(self.backbone))

    def head(self, name: str) -> ProjectionHead:
        t = self.heads[name]
        params = ParamStore({k: v for k, v in t.items() if k.startswith("proj.")})
        return ProjectionHead(params, t["stat.mean"].numpy(), t["stat.std"].numpy(), self.config)

    def tensor_digest(self) -> str:
        h = hashlib.sha256()
        groups = [("backbone", self.backbone)] + [(f"head:{n}", t) for n, t in sorted(self.heads.items())]
        for label, tensors in groups:
            for name in sorted(tensors):
                h.update(f"{label}/{name}".encode())
                h.update(tensors[name].detach().contiguous().numpy().tobytes())
        return h.hexdigest()


def head_tensors(head: ProjectionHead) -> dict[str, torch.Tensor]:
    out = head.params.state_dict()
    out["stat.mean"] = torch.as_tensor(head.mean, dtype=torch.float64)
    out["stat.std"] = torch.as_tensor(head.std, dtype=torch.float64)
    return out


def _name(s: str, width: str = "<H") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def _tensor_record(name: str, t: torch.Tensor) -> bytes:
    t = t.detach().contiguous()
    if t.dtype not in _TAGS:
        raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
    tag = _TAGS[t.dtype]
    body = (
        _name(name)
        + struct.pack("<BB", tag, t.dim())
        + struct.pack(f"<{t.dim()}Q", *t.shape)
        + t.numpy().astype(_NP[tag], copy=False).tobytes()
    )
    return struct.pack("<Q", len(body)) + body


def _meta_record(key: str, value: str) -> bytes:
    body = _name(key) + _name(value, "<I")
    return struct.pack("<Q", len(body)) + body


def _section(label: str, records: list[bytes]) -> bytes:
    return _name(label) + struct.pack("<I", len(records)) + b"".join(records)


def section_bytes(label: str, tensors: dict[str, torch.Tensor]) -> bytes:
    return _section(label, [_tensor_record(n, tensors[n]) for n in sorted(tensors)])


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {"model_config": ckpt.config.to_json(), **ckpt.meta}
    sections = [section_bytes("backbone", ckpt.backbone)]
    sections += [section_bytes(f"head:{n}", t) for n, t in sorted(ckpt.heads.items())]
    if ckpt.optim:
        sections.append(section_bytes("optim", ckpt.optim))
    sections.append(_section("meta", [_meta_record(k, meta[k]) for k in sorted(meta)]))
    return MAGIC + struct.pack("<II", VERSION, len(sections)) + b"".join(sections)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


class _Buf:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        return self.take(n).decode("utf-8")


def _parse_tensor(body: bytes) -> tuple[str, torch.Tensor]:
    b = _Buf(body)
    name = b.name()
    tag, ndim = b.unpack("<BB")
    if tag not in _DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag} for {name}")
    shape = b.unpack(f"<{ndim}Q") if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    payload = b.take(count * np.dtype(_NP[tag]).itemsize)
    arr = np.frombuffer(payload, dtype=_NP[tag]).reshape(shape).copy()
    return name, torch.from_numpy(arr)


def from_bytes(data: bytes, which: str = "full") -> Checkpoint:
    if which not in ("full", "backbone_only"):
        raise ValueError("which must be 'full' or 'backbone_only'")
    b = _Buf(data)
    if b.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, nsec = b.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (this build reads version {VERSION})")
    backbone: dict = {}
    heads: dict = {}
    optim: dict = {}
    meta: dict = {}
    for _ in range(nsec):
        label = b.name()
        (nrec,) = b.unpack("<I")
        keep = which == "full" or label in ("backbone", "meta")
        for _ in range(nrec):
            (length,) = b.unpack("<Q")
            body = b.take(length)
            if not keep:
                continue
            if label == "meta":
                mb = _Buf(body)
                key = mb.name()
                meta[key] = mb.name("<I")
            else:
                name, t = _parse_tensor(body)
                if label == "backbone":
                    backbone[name] = t
                elif label == "optim":
                    optim[name] = t
                elif label.startswith("head:"):
                    heads.setdefault(label[5:], {})[name] = t
                else:
                    raise CheckpointError(f"unknown section {label!r}")
    if b.pos != len(data):
        raise CheckpointError("trailing bytes after last section")
    if "model_config" not in meta:
        raise CheckpointError("checkpoint has no model_config")
    cfg = ModelConfig.from_json(meta.pop("model_config"))
    return Checkpoint(cfg, backbone, heads, optim or None, meta)


def load_checkpoint(path, which: str = "full") -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), which)


def backbone_section_size(ckpt: Checkpoint) -> int:
    return len(section_bytes("backbone", ckpt.backbone))
