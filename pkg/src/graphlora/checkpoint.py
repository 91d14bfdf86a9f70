"""Checkpoint directories: ``manifest.json`` plus one matrix blob per tensor."""

from __future__ import annotations

import json
import os
import shutil
from pathlib import Path

import numpy as np

from .numerics import read_matrix, write_matrix

__all__ = ["save_checkpoint", "load_checkpoint", "frozen_digest"]

BLOB_DIR = "tensors"


def save_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> Path:
    """Write atomically: build in a sibling temp directory, then swap it in."""
    root = Path(path)
    tmp = root.with_name(root.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / BLOB_DIR).mkdir(parents=True)
    shapes = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        shapes[name] = list(arr.shape)
        write_matrix(arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(-1, 1),
                     tmp / BLOB_DIR / f"{name}.f64")
    manifest = {**manifest, "tensors": shapes}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if root.exists():
        shutil.rmtree(root)
    os.replace(tmp, root)
    return root


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    tensors = {}
    for name, shape in manifest["tensors"].items():
        tensors[name] = read_matrix(root / BLOB_DIR / f"{name}.f64").reshape(shape)
    return manifest, tensors


def frozen_digest(params: dict[str, np.ndarray], names) -> str:
    """SHA-256 over the raw bytes of the named tensors, in sorted name order."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
