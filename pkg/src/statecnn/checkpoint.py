"""Binary checkpoint format.

Layout, little-endian throughout::

    b"SCNNCKPT" | uint32 version | uint64 manifest length | UTF-8 JSON manifest | payload

The payload concatenates every parameter (weights and batchnorm moving
statistics, in model order) as row-major float32. The manifest records each
tensor's name, layer, kind, shape, trainable flag and byte offset, plus the
model configuration needed to rebuild a template.
"""
from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from . import tensor
from .errors import CheckpointError, ShapeError
from .model import StateClassifier, from_config

MAGIC = b"SCNNCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def _layer_index(model: StateClassifier) -> dict[int, tuple[str, str]]:
    owners = {}
    for unit in model.backbone.units:
        for layer in getattr(unit, "layers", []):
            for p in layer.params:
                owners[id(p)] = (layer.name, layer.kind)
    for layer in model.head.layers:
        for p in layer.params:
            owners[id(p)] = (layer.name, layer.kind)
    return owners


def save(model: StateClassifier, path, epoch: int | None = None, stage: int | None = None,
         metrics: dict | None = None) -> Path:
    """Write ``model`` to ``path`` atomically (temp file + rename)."""
    owners = _layer_index(model)
    entries, chunks, offset = [], [], 0
    for p in model.params:
        buf = tensor.to_bytes(p.value)
        layer, kind = owners[id(p)]
        entries.append({"name": p.name, "layer": layer, "kind": kind, "shape": list(p.value.shape),
                        "trainable": p.trainable, "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"format_version": VERSION, "model": model.config, "classes": model.classes,
                "epoch": epoch, "stage": stage, "metrics": metrics or {}, "tensors": entries}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)
    return path


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint; returns ``(manifest, arrays by name)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from None
    payload = raw[start:]
    expected, arrays = 0, {}
    for e in manifest["tensors"]:
        nbytes = math.prod(e["shape"]) * 4
        if e["offset"] != expected or e["nbytes"] != nbytes:
            raise CheckpointError(f"{path}: non-contiguous entry for {e['name']}")
        expected += nbytes
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, manifest expects {expected}")
    for e in manifest["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"])
    return manifest, arrays


def load(path, model: StateClassifier) -> StateClassifier:
    """Restore parameters and trainable flags into ``model`` in place.

    Nothing is written unless every tensor matches the template.
    """
    manifest, arrays = read(path)
    by_name = {e["name"]: e for e in manifest["tensors"]}
    params = model.params
    names = [p.name for p in params]
    missing = [n for n in names if n not in by_name]
    extra = [n for n in by_name if n not in set(names)]
    if missing or extra:
        raise CheckpointError(f"{path}: tensors do not match the model "
                              f"(missing {missing[:5]}, unexpected {extra[:5]})")
    for p in params:
        e = by_name[p.name]
        if tuple(e["shape"]) != p.value.shape:
            raise ShapeError(f"{path}: layer {e['layer']!r} tensor {p.name} has shape "
                             f"{tuple(e['shape'])}, model expects {p.value.shape}")
    for p in params:
        p.value = arrays[p.name].astype(p.value.dtype)
        if not p.statistic:
            p.trainable = bool(by_name[p.name]["trainable"])
        p.grad = None
    return model


def load_model(path, dtype=np.float32) -> tuple[StateClassifier, dict]:
    """Rebuild a model from the checkpoint's own configuration and load it."""
    manifest, _ = read(path)
    model = from_config(manifest["model"], dtype)
    return load(path, model), manifest
