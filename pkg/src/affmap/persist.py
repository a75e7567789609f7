"""Manifest + raw blob container shared by operators and checkpoints.

A bundle is a JSON manifest next to one little-endian float blob. The manifest
lists every array by name with its dtype, shape and byte offset into the blob.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "affmap-bundle/1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_bundle(manifest_path, meta: dict, arrays: dict, dtype="float32"):
    """Write ``<name>.json`` and ``<name>.bin``; returns the blob path."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name], dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arrays[name])), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "blob": blob_path.name, "dtype": dtype, "arrays": entries, "meta": meta}
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return blob_path


def load_bundle(manifest_path):
    """Return ``(meta, arrays)``; arrays come back as float64."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: not an {FORMAT} manifest")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    dt = np.dtype(_DTYPES[manifest["dtype"]])
    arrays = {}
    for e in manifest["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(np.float64)
    return manifest["meta"], arrays
