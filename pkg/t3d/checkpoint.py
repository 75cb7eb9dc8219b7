# t3d/checkpoint.py
"""
Checkpoint layout (little-endian):

    8 bytes   magic b"T3DCKPT\\0"
    u32       format version
    u32 + N   JSON header {"spec": ArchSpec, "dtype": "float32" | "float64", "meta": {...}}
    u32       tensor count
    per tensor: u16 + name bytes, then a serialized tensor (see kernels.write_tensor)

Tensors are written in the model's declaration order, as 32-bit reals
unless the header says float64. Headers without "dtype" are float32.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from t3d import kernels as K
from t3d.common import CheckpointError, SpecError
from t3d.models.network import Network3D
from t3d.schemas import ArchSpec

logger = logging.getLogger(__name__)

MAGIC = b"T3DCKPT\0"
VERSION = 1

PathLike = Union[str, Path]

WIRE = {"float32": "<f4", "float64": "<f8"}


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1024 * 1024), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) < n:
        raise CheckpointError(f"truncated checkpoint while reading {what}", {"wanted": n, "got": len(buf)})
    return buf


def save_checkpoint(model: Network3D, path: PathLike, meta: Optional[Dict[str, Any]] = None) -> Path:
    """Atomic write: a .part file is renamed into place once complete."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(model.dtype).name
    if dtype not in WIRE:
        raise CheckpointError(f"cannot store {dtype} tensors", {"supported": sorted(WIRE)})
    header = json.dumps(
        {"spec": model.spec.model_dump(mode="json"), "dtype": dtype, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    tensors = list(model.named_tensors())

    tmp = out.with_suffix(out.suffix + ".part")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            K.write_tensor(fh, arr, WIRE[dtype])
    tmp.replace(out)
    logger.debug("saved %s (%d tensors, %.2f MB)", out, len(tensors), out.stat().st_size / 1024 / 1024)
    return out


def read_checkpoint(path: PathLike) -> Tuple[ArchSpec, Dict[str, Any], Dict[str, np.ndarray]]:
    """(spec, meta, tensors) without building a model; tensors keep the stored dtype."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}", {"path": str(p)})
    with p.open("rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{p} is not a checkpoint", {"path": str(p)})
        version, hlen = struct.unpack("<II", _read_exact(fh, 8, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}", {"supported": VERSION})
        try:
            header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
            spec = ArchSpec.model_validate(header["spec"])
            wire = WIRE[header.get("dtype", "float32")]
        except (ValueError, KeyError, ValidationError) as e:
            raise CheckpointError(f"corrupt checkpoint header in {p}", {"error": str(e)})
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name"))
            name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
            tensors[name] = K.read_tensor(fh, wire)
    return spec, dict(header.get("meta") or {}), tensors


def load_checkpoint(path: PathLike, expected: Optional[ArchSpec] = None) -> Network3D:
    """
    Rebuild the saved network. With `expected`, the stored spec must match it
    exactly or SpecError is raised. Nothing is built until the whole file has
    been read.
    """
    spec, meta, tensors = read_checkpoint(path)
    if expected is not None and expected.model_dump() != spec.model_dump():
        raise SpecError(
            f"checkpoint holds {spec.name!r}, expected {expected.name!r}",
            {"stored": spec.name, "expected": expected.name},
        )
    dtype = next(iter(tensors.values())).dtype if tensors else K.FLOAT
    model = Network3D(spec, np.random.default_rng(0), dtype)
    model.load_state_dict(tensors)
    model.eval()
    logger.debug("loaded %s (%s, meta=%s)", path, spec.name, meta)
    return model
