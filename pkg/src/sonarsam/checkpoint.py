"""Binary checkpoint format.

Layout (all integers uint32 little-endian)::

    b"SSAM1"
    count
    repeated count times:
        name length, name bytes (UTF-8)
        rank, extents[rank]
        float32 little-endian values, C order

Model metadata (preset, class count, head, adapters) lives next to the
checkpoint in ``<path>.json`` so a model can be rebuilt before loading.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError, ShapeError
from .model import BackbonePreset, MiniSamModel, build_model

MAGIC = b"SSAM1"
_U32 = struct.Struct("<I")


def _pack(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, _U32.pack(len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        out += [_U32.pack(n) for n in arr.shape]
        out.append(arr.tobytes())
    return b"".join(out)


def _unpack(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise IngestionError("not a checkpoint: bad magic")
    pos = len(MAGIC)

    def u32() -> int:
        nonlocal pos
        if pos + 4 > len(buf):
            raise IngestionError("truncated checkpoint")
        (v,) = _U32.unpack_from(buf, pos)
        pos += 4
        return v

    tensors = {}
    for _ in range(u32()):
        n = u32()
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise IngestionError(f"truncated checkpoint at tensor {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise IngestionError("trailing bytes after last tensor")
    return tensors


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(_pack(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    return _unpack(Path(path).read_bytes())


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, model: MiniSamModel, extra: dict | None = None) -> None:
    save_tensors(path, model.state())
    meta = model.metadata()
    if extra:
        meta["extra"] = extra
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_into(model: MiniSamModel, tensors: dict[str, np.ndarray]) -> MiniSamModel:
    """Copy tensors into a structurally identical model, in place."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise ConfigurationError(f"checkpoint does not match model (missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        target = params[name].data if name in params else buffers[name]
        if target.shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint {arr.shape} vs model {target.shape}")
        target[...] = arr
    return model


def read_metadata(path) -> dict:
    side = _sidecar(path)
    if not side.exists():
        raise IngestionError(f"checkpoint metadata {side} not found")
    return json.loads(side.read_text())


def model_from_checkpoint(path) -> MiniSamModel:
    """Rebuild the architecture from the sidecar, then load the weights."""
    from .adapters import install_adapters

    meta = read_metadata(path)
    model = build_model(BackbonePreset(**meta["preset"]), meta["num_classes"], meta["seed"], meta["semantic_head"])
    install_adapters(model, meta.get("adapters", {}))
    return load_into(model, load_tensors(path))
