"""Checkpoint directories: ``manifest.json`` plus ``params.bin``.

``params.bin`` holds little-endian float32 blobs concatenated in manifest
order; the manifest's parameter table gives name, shape, offset and length.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import FusionParams
from .errors import CheckpointError, ConfigError
from .tensor import Tensor
from .transformer import ModelConfig, TransformerModel, param_shapes

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    path: Path
    model: TransformerModel
    manifest: dict
    fusion: FusionParams | None = None
    decoder_fusion: FusionParams | None = None
    extras: dict = field(default_factory=dict)


def _named_tensors(model, fusion, decoder_fusion):
    items = list(model.params.items())
    for group in (fusion, decoder_fusion):
        if group is not None:
            items.extend(group.named_parameters())
    return items


def save_checkpoint(path, model: TransformerModel, fusion=None, manifest=None, decoder_fusion=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    tmp = path / (BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for name, tensor in _named_tensors(model, fusion, decoder_fusion):
            blob = np.ascontiguousarray(tensor.data, dtype=_LE_F32).tobytes()
            fh.write(blob)
            table.append({"name": name, "shape": list(tensor.shape), "byte_offset": offset, "byte_len": len(blob)})
            offset += len(blob)
    os.replace(tmp, path / BLOB)
    doc = {"format_version": FORMAT_VERSION, "config": model.config.to_dict()}
    for key, value in (manifest or {}).items():
        if key not in ("format_version", "config", "params"):
            doc[key] = value
    doc["params"] = table
    (path / MANIFEST).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format_version {doc.get('format_version')!r} != {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(doc["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad model config in manifest: {exc}") from None
    blob_path = path / BLOB
    if not blob_path.exists():
        raise CheckpointError(f"missing {BLOB} in {path}")
    raw = blob_path.read_bytes()

    expected = param_shapes(config)
    tensors = {}
    end = 0
    for entry in doc.get("params", []):
        name = entry["name"]
        shape = tuple(entry["shape"])
        off, length = entry["byte_offset"], entry["byte_len"]
        if name in expected and expected[name] != shape:
            raise CheckpointError(f"shape {shape} does not match config shape {expected[name]}", name)
        if length != int(np.prod(shape)) * _LE_F32.itemsize:
            raise CheckpointError(f"byte_len {length} inconsistent with shape {shape}", name)
        if off < 0 or off + length > len(raw):
            raise CheckpointError(f"blob truncated: needs bytes [{off}, {off + length}) of {len(raw)}", name)
        arr = np.frombuffer(raw, dtype=_LE_F32, count=length // 4, offset=off).astype(np.float32).reshape(shape)
        tensors[name] = arr
        end = max(end, off + length)
    if end != len(raw):
        raise CheckpointError(f"{BLOB} has {len(raw) - end} unexpected trailing bytes")
    for name in expected:
        if name not in tensors:
            raise CheckpointError("missing from checkpoint", name)

    params = {n: Tensor(tensors[n], requires_grad=True, name=n) for n in expected}
    model = TransformerModel(config, params)
    fusion = _load_fusion(tensors, "fusion")
    dec_fusion = _load_fusion(tensors, "dec_fusion")
    known = set(expected) | {n for n in tensors if n.startswith(("fusion.", "dec_fusion."))}
    unknown = set(tensors) - known
    if unknown:
        raise CheckpointError("not part of the model", sorted(unknown)[0])
    return Checkpoint(path, model, doc, fusion, dec_fusion)


def _load_fusion(tensors, prefix):
    weights, biases = [], []
    i = 0
    while f"{prefix}.{i}.weight" in tensors:
        for kind, out in (("weight", weights), ("bias", biases)):
            name = f"{prefix}.{i}.{kind}"
            if name not in tensors:
                raise CheckpointError("missing from checkpoint", name)
            out.append(Tensor(tensors[name], requires_grad=True, name=name))
        i += 1
    return FusionParams(weights, biases) if weights else None


def params_digest(model: TransformerModel) -> str:
    h = hashlib.sha256()
    for name, tensor in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.data).tobytes())
    return h.hexdigest()
