"""Binary PPM/PGM/PBM read/write for float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, image):
    """image: (H, W, 3) floats in [0, 1] -> binary P6 file."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected (H, W, 3) image")
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    (w, h, maxval), offset = _read_header(raw, 3)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=offset)
    return pixels.reshape(h, w, 3).astype(np.float32) / maxval


def write_pgm(path, image):
    """image: (H, W) floats in [0, 1] -> binary P5 file."""
    image = np.asarray(image)
    h, w = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def write_pbm(path, mask):
    """mask: (H, W) of {0,1}; 1 renders black per PBM convention."""
    mask = np.asarray(mask).astype(np.uint8)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode() + packed.tobytes())


def _read_header(raw, n_fields):
    # magic + n_fields whitespace-separated integers, comments allowed
    fields = []
    i = 2  # skip magic
    while len(fields) < n_fields:
        while raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while raw[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while not raw[j : j + 1].isspace():
            j += 1
        fields.append(int(raw[i:j]))
        i = j
    return fields, i + 1
