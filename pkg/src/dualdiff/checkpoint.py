"""Checkpoint files.

Layout (all integers little-endian)::

    b"IDOLCKP1"                       magic
    u32 version
    u32 manifest length, manifest     canonical UTF-8 JSON (sorted keys)
    u32 CRC32 of the manifest bytes
    u32 tensor count
    per tensor, in sorted name order:
        u32 name length, name (UTF-8)
        u32 ndim, u64 x ndim shape
        u64 payload length, payload (float32 little-endian, C order)
        u32 CRC32 over every byte of this record before the CRC

Serialization is canonical, so save -> load -> save reproduces the file byte
for byte.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"IDOLCKP1"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass
class CoverageReport:
    restored: list = field(default_factory=list)
    initialized: list = field(default_factory=list)
    unexpected: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"restored": self.restored, "initialized": self.initialized, "unexpected": self.unexpected}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_checkpoint(tensors: dict, manifest: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    mbytes = _canonical_json(manifest)
    buf.write(struct.pack("<I", len(mbytes)))
    buf.write(mbytes)
    buf.write(struct.pack("<I", zlib.crc32(mbytes)))
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        rec = io.BytesIO()
        rec.write(struct.pack("<I", len(nb)))
        rec.write(nb)
        rec.write(struct.pack("<I", arr.ndim))
        rec.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        rec.write(struct.pack("<Q", len(payload)))
        rec.write(payload)
        body = rec.getvalue()
        buf.write(body)
        buf.write(struct.pack("<I", zlib.crc32(body)))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointIntegrityError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> tuple:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}; expected {FORMAT_VERSION}")
    (mlen,) = r.unpack("<I")
    mbytes = r.take(mlen)
    (mcrc,) = r.unpack("<I")
    if zlib.crc32(mbytes) != mcrc:
        raise CheckpointIntegrityError("manifest checksum mismatch")
    manifest = json.loads(mbytes.decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<I")
        name_bytes = r.take(nlen)
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (plen,) = r.unpack("<Q")
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if plen != expected:
            raise CheckpointIntegrityError(f"payload length {plen} does not match shape {shape}")
        payload = r.take(plen)
        body = data[start:r.pos]
        (crc,) = r.unpack("<I")
        if zlib.crc32(body) != crc:
            raise CheckpointIntegrityError(f"checksum mismatch in tensor record {name_bytes!r}")
        name = name_bytes.decode("utf-8")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointIntegrityError("trailing bytes after last tensor record")
    return tensors, manifest


def save_checkpoint(model: nn.Module, config: dict, step: int, path: Path, schedule=None,
                    extra: Optional[dict] = None) -> None:
    tensors = {name: p.detach().cpu().to(torch.float32).numpy() for name, p in model.named_parameters()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "model": model.cfg.to_dict() if hasattr(model, "cfg") else None,
        "schedule": schedule.to_manifest() if schedule is not None else None,
        "step": int(step),
        "tensors": sorted(tensors),
    }
    if extra:
        manifest["extra"] = extra
    Path(path).write_bytes(encode_checkpoint(tensors, manifest))


def load_checkpoint(path: Path) -> tuple:
    """Returns (name -> float32 array, manifest)."""
    return decode_checkpoint(Path(path).read_bytes())


def restore_parameters(model: nn.Module, tensors: dict) -> CoverageReport:
    """Copy matching tensors into ``model``; parameters absent from the checkpoint keep their fresh init."""
    report = CoverageReport()
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            if name not in tensors:
                report.initialized.append(name)
                continue
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))
            report.restored.append(name)
    report.unexpected = sorted(set(tensors) - set(params))
    return report
