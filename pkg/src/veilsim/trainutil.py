"""Shared training helpers: seeding, cropping, schedules, loss logging."""

from __future__ import annotations

import csv
import hashlib
import math

import numpy as np
import torch


def derive_seed(base: int, label: str) -> int:
    """Stable per-stage sub-seed from a master seed and a stage label."""
    digest = hashlib.sha256(f"{base}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % (2**31)


def cosine_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Cosine annealing from ``lr_start`` to ``lr_end`` over ``total`` steps."""
    if total <= 1:
        return lr_end
    frac = min(step / (total - 1), 1.0)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))


def set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def aligned_crop_origin(rng: np.random.Generator, height: int, width: int, crop: int, align: int = 1):
    """Random crop origin snapped to ``align``-pixel boundaries.

    Alignment keeps image crops and their quarter-resolution map crops in
    exact spatial correspondence.
    """
    max_y = (height - crop) // align
    max_x = (width - crop) // align
    return align * int(rng.integers(0, max_y + 1)), align * int(rng.integers(0, max_x + 1))


def to_batch(images) -> torch.Tensor:
    """List of H,W,C arrays to a (B, C, H, W) float32 tensor."""
    return torch.as_tensor(
        np.stack([np.asarray(im, dtype=np.float32).transpose(2, 0, 1) for im in images])
    )


def write_loss_csv(path, rows, header=("iter", "loss")) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)
