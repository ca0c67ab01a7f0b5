"""Checkpoint persistence: a JSON manifest naming tensors plus one raw
little-endian float32 file per tensor."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def save_checkpoint(directory, tensors, meta=None):
    """Write named arrays (or Tensors) under `directory`.

    Layout: manifest.json + <name>.bin (little-endian float32, row-major).
    Writes are byte-deterministic for identical inputs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        arr = np.asarray(getattr(tensors[name], "data", tensors[name]), dtype="<f4")
        fname = name.replace("/", "_") + ".bin"
        (directory / fname).write_bytes(arr.tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"tensors": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Returns (dict name -> float32 ndarray, meta dict)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {}
    for name, entry in manifest["tensors"].items():
        raw = (directory / entry["file"]).read_bytes()
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return tensors, manifest.get("meta", {})


def checkpoint_checksum(tensors):
    """sha256 over tensor names and raw bytes, order-independent."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(getattr(tensors[name], "data", tensors[name]), dtype="<f4")
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def checkpoint_exists(directory):
    return (Path(directory) / "manifest.json").exists()
