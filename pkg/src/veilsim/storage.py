"""On-disk formats: the float-payload container and PNG image I/O.

The container is a single file holding a JSON header followed by named raw
little-endian float32 payloads. PSF banks, glare fields, and network
checkpoints all use it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import cv2
import numpy as np

from .errors import ValidationError

MAGIC = b"VSC1"


def write_container(path, header: dict, arrays: dict) -> None:
    """Atomically write ``header`` plus named float32 arrays to ``path``."""
    manifest = {
        "header": header,
        "arrays": [{"name": k, "shape": list(np.asarray(v).shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for value in arrays.values():
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_container(path):
    """Return ``(header, arrays)`` from a container file."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValidationError(f"{path}: not a container file (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(blob_len).decode("utf-8"))
        arrays = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4")
            if data.size != count:
                raise ValidationError(f"{path}: truncated payload for {entry['name']!r}")
            arrays[entry["name"]] = data.reshape(shape).astype(np.float64)
    return manifest["header"], arrays


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_png(path, image: np.ndarray, bit_depth: int = 8) -> None:
    """Write an H, W, C float image as PNG, clamping to [0, 1] here only.

    Clamping happens at this I/O boundary and nowhere inside the math, so
    the degradation algebra stays exactly invertible in memory.
    """
    if bit_depth not in (8, 16):
        raise ValidationError(f"bit_depth must be 8 or 16, got {bit_depth}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValidationError(f"expected H,W,{{1,3}} image, got shape {img.shape}")
    img = np.clip(img, 0.0, 1.0)
    peak = 255 if bit_depth == 8 else 65535
    quant = np.round(img * peak).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if quant.shape[2] == 3:
        quant = quant[:, :, ::-1]  # cv2 expects BGR
    else:
        quant = quant[:, :, 0]
    if not cv2.imwrite(str(path), quant):
        raise ValidationError(f"failed to write PNG {path}")


def read_png(path) -> np.ndarray:
    """Read a PNG as float64 H, W, C in [0, 1] (grayscale keeps C=1)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValidationError(f"failed to read PNG {path}")
    peak = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / peak
    if img.ndim == 2:
        return img[:, :, None]
    if img.shape[2] == 4:
        img = img[:, :, :3]
    return img[:, :, ::-1].copy()  # BGR -> RGB
