"""Checkpoint directory format: manifest.json plus raw little-endian blobs."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .refmodel import FloatModel, ModelConfig


class CheckpointError(RuntimeError):
    pass


BLOB = "weights.bin"


def save_checkpoint(model: FloatModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        raw = arr.tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "file": BLOB,
                "byte_offset": offset,
                "byte_len": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "config": asdict(model.config),
        "meta": model.meta,
        "tensors": tensors,
    }
    (directory / BLOB).write_bytes(b"".join(chunks))
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> FloatModel:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest: {e}") from e
    config = ModelConfig(**manifest["config"])
    params = {}
    blobs: dict[str, bytes] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']}")
        if entry["file"] not in blobs:
            blob_path = directory / entry["file"]
            if not blob_path.exists():
                raise CheckpointError(f"missing blob: {blob_path}")
            blobs[entry["file"]] = blob_path.read_bytes()
        raw = blobs[entry["file"]][entry["byte_offset"] : entry["byte_offset"] + entry["byte_len"]]
        if len(raw) != entry["byte_len"]:
            raise CheckpointError(f"truncated blob for tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4")
        if arr.size != int(np.prod(entry["shape"])):
            raise CheckpointError(
                f"shape mismatch for {entry['name']}: {entry['shape']} vs {arr.size} values"
            )
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return FloatModel(config, params, meta=manifest.get("meta", {}))
