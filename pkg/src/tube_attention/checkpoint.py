"""JSON manifest + raw little-endian blob, shared by parameter and model checkpoints.

A checkpoint at ``stem`` is two files: ``stem.json`` describing every tensor
(name, shape, byte offset) plus free-form metadata, and ``stem.bin`` holding
the tensors back to back in the declared order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ResolutionError

FORMAT = "TSA-CKPT"
VERSION = 1
_DT = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


def _paths(stem) -> tuple:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save(stem, tensors: dict, kind: str, meta: dict | None = None, dtype: str = "f64") -> Path:
    json_path, bin_path = _paths(stem)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype=_DT[dtype]).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "dtype": dtype,
        "blob": bin_path.name,
        "tensors": entries,
        "meta": meta or {},
    }
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return json_path


def load(stem, kind: str | None = None) -> tuple:
    """Return ``(tensors, meta)``; tensors keep the declared order."""
    json_path, _ = _paths(stem)
    if not json_path.exists():
        raise ResolutionError(f"checkpoint manifest not found: {json_path}")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{json_path}: not a {FORMAT} checkpoint")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{json_path}: checkpoint version {manifest.get('version')} unsupported (expected {VERSION})")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{json_path}: checkpoint kind {manifest.get('kind')!r}, expected {kind!r} (version {VERSION})")
    bin_path = json_path.parent / manifest["blob"]
    if not bin_path.exists():
        raise ResolutionError(f"checkpoint blob not found: {bin_path}")
    raw = bin_path.read_bytes()
    dt = _DT[manifest["dtype"]]
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + count * dt.itemsize > len(raw):
            raise CheckpointError(f"{bin_path}: tensor {e['name']} overruns the blob")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float64)
    return tensors, manifest["meta"]
