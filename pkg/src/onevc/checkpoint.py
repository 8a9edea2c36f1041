"""Tensor-archive persistence.

A checkpoint is a single zip file holding a ``manifest.json`` plus one raw
little-endian float32 blob per named tensor under ``tensors/``.  Names,
shapes and dtypes live in the manifest, so the format is readable without
this library.  The same container stores model parameters, EMA buffers,
approximator parameters and optimizer moments.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT_NAME = "onevc-checkpoint"
FORMAT_VERSION = 1


def save_archive(path: str | Path, tensors: dict[str, np.ndarray], manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.dtype("<f4"):
            arr = arr.astype("<f4")
        index[name] = {"shape": list(arr.shape), "dtype": "<f4"}
        tensors[name] = arr
    doc = dict(manifest)
    doc["format"] = FORMAT_NAME
    doc["format_version"] = FORMAT_VERSION
    doc["tensors"] = index
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(doc, indent=1))
        for name, arr in tensors.items():
            zf.writestr(f"tensors/{name}", np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_NAME:
            raise ValueError(f"{path} is not a {FORMAT_NAME} archive")
        tensors = {}
        for name, info in manifest["tensors"].items():
            raw = zf.read(f"tensors/{name}")
            tensors[name] = np.frombuffer(raw, dtype=info["dtype"]).reshape(info["shape"]).copy()
    return tensors, manifest


def file_digest(path: str | Path) -> str:
    """Short content hash of a file, recorded in conversion sidecars."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
