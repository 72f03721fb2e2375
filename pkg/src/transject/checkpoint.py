"""Binary checkpoints: one JSON header line, then raw little-endian float64 arrays.

The header records the model kind, its config and a manifest of
``(name, shape, offset)`` entries in parameter order.
"""

from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .baseline import BaselineConfig, BaselineTransformer
from .model import TransJect, TransJectConfig

MAGIC = "transject-checkpoint/1"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def model_kind(model) -> str:
    return "transject" if isinstance(model, TransJect) else model.config.variant


def build_model(kind: str, config: dict):
    if kind == "transject":
        return TransJect(TransJectConfig(**config))
    cfg = dict(config)
    cfg.setdefault("variant", kind)
    return BaselineTransformer(BaselineConfig(**cfg))


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    params = model.parameters()
    manifest, offset = [], 0
    for name, t in params.items():
        manifest.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        offset += t.data.size
    header = {"magic": MAGIC, "kind": model_kind(model),
              "config": dataclasses.asdict(model.config), "manifest": manifest,
              "extra": extra or {}}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype=_DTYPE).tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    body = np.frombuffer(raw[nl + 1:], dtype=_DTYPE)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["manifest"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = body[entry["offset"]:entry["offset"] + size]
        if chunk.size != size:
            raise CheckpointError(f"{path}: truncated at {entry['name']}")
        arrays[entry["name"]] = chunk.reshape(entry["shape"]).copy()
    return header, arrays


def load_into(model, arrays) -> None:
    params = model.parameters()
    if list(params) != list(arrays):
        missing = set(params) ^ set(arrays)
        raise CheckpointError(f"parameter names differ: {sorted(missing)[:5]}")
    for name, t in params.items():
        if t.data.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {t.data.shape}")
        t.assign_(arrays[name])


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    header, arrays = read_checkpoint(path)
    model = build_model(header["kind"], header["config"])
    load_into(model, arrays)
    return model, header


def parameter_report(model) -> "OrderedDict[str, int]":
    """Scalar counts grouped by module: embed, spectral, layers.<i>, head."""
    report: "OrderedDict[str, int]" = OrderedDict()
    for name, t in model.parameters().items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "layers" else parts[0]
        report[key] = report.get(key, 0) + int(t.data.size)
    return report


def count_parameters(model) -> int:
    return sum(int(t.data.size) for t in model.parameters().values())
