"""Procedural clean images and the synthetic oracle dataset.

The oracle dataset stands in for real captures: a fixed synthetic optic
(one PSF bank per dataset) produces the aberration-only source domain, and
per-image glare fields produce the compound target domain. Ground-truth
cleans and maps are stored for verification; the training path never reads
the target-domain ground truth.
"""

from __future__ import annotations

import json
import os

import numpy as np
from scipy import ndimage

from .degradation import (
    GlareMaps,
    PatchGrid,
    PSFBank,
    apply_psf_patchwise,
    compose_degradation,
    synthesize_glare_fields,
    synthesize_psf_bank,
)
from .errors import ConfigurationError, ValidationError
from .storage import read_png, write_png


def make_clean_image(seed: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Seeded mixture of gradients, soft shapes, and band-limited noise."""
    rng = np.random.default_rng(seed)
    ys = np.linspace(0.0, 1.0, height)[:, None, None]
    xs = np.linspace(0.0, 1.0, width)[None, :, None]
    direction = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(direction) * xs + np.sin(direction) * ys
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    color_a = rng.uniform(0.1, 0.9, size=channels)
    color_b = rng.uniform(0.1, 0.9, size=channels)
    img = color_a + ramp * (color_b - color_a)

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry = rng.uniform(0.08, 0.35) * height
        rx = rng.uniform(0.08, 0.35) * width
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (ct * (xx - cx) + st * (yy - cy)) / rx
        v = (-st * (xx - cx) + ct * (yy - cy)) / ry
        dist = u**2 + v**2
        if rng.random() < 0.4:
            mask = np.clip(1.5 - np.maximum(np.abs(u), np.abs(v)) ** 2, 0.0, 1.0)
        else:
            mask = np.clip(1.5 - dist, 0.0, 1.0)
        mask = np.minimum(mask, 1.0)
        color = rng.uniform(0.05, 0.95, size=channels)
        alpha = rng.uniform(0.5, 1.0) * mask[:, :, None]
        img = img * (1 - alpha) + color * alpha

    noise = rng.standard_normal((height, width, channels))
    sigma = rng.uniform(1.0, 3.0)
    for ch in range(channels):
        noise[:, :, ch] = ndimage.gaussian_filter(noise[:, :, ch], sigma)
    noise /= max(np.abs(noise).max(), 1e-9)
    img = img + rng.uniform(0.05, 0.12) * noise

    lo, hi = img.min(), img.max()
    return 0.03 + 0.94 * (img - lo) / max(hi - lo, 1e-9)


def load_clean_dir(path, size: int, channels: int) -> list:
    """User-supplied clean corpus: center-cropped/resized PNGs from a folder."""
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".png"))
    if not names:
        raise ConfigurationError(f"no PNG images found in {path}")
    images = []
    for name in names:
        img = read_png(os.path.join(path, name))
        if img.shape[2] == 1 and channels == 3:
            img = np.repeat(img, 3, axis=2)
        elif img.shape[2] == 3 and channels == 1:
            img = img.mean(axis=2, keepdims=True)
        h, w = img.shape[:2]
        side = min(h, w)
        y0, x0 = (h - side) // 2, (w - side) // 2
        img = img[y0 : y0 + side, x0 : x0 + side]
        if side != size:
            from .degradation import resize_bilinear

            img = np.stack(
                [resize_bilinear(img[:, :, c], (size, size)) for c in range(img.shape[2])],
                axis=2,
            )
        images.append(img)
    return images


SPLITS = ("source_train", "source_test", "target_train", "target_test")


def build_oracle_dataset(
    out_dir,
    seed: int,
    image_size: int,
    channels: int,
    grid_rows: int,
    grid_cols: int,
    kernel_size: int,
    severity: float,
    glare_strength: float,
    map_downscale: int,
    counts: dict,
    clean_images: list | None = None,
) -> str:
    """Write the full oracle dataset tree; returns the manifest path.

    Scene seeds are globally unique across splits so contents stay disjoint.
    Degraded images are stored as 16-bit PNG to keep quantization far below
    the verification tolerances.
    """
    os.makedirs(out_dir, exist_ok=True)
    bank = synthesize_psf_bank(seed, (grid_rows, grid_cols), kernel_size, severity)
    grid = PatchGrid(image_size, image_size, grid_rows, grid_cols)
    bank.save(os.path.join(out_dir, "optics.bin"), {"seed": seed, "severity": severity})

    map_res = max(image_size // map_downscale, 4)
    records = []
    scene = 0
    for split in SPLITS:
        count = int(counts[split])
        split_dir = os.path.join(out_dir, *split.split("_"))
        for sub in ("clean", "degraded") + (("maps",) if split.startswith("target") else ()):
            os.makedirs(os.path.join(split_dir, sub), exist_ok=True)
        for i in range(count):
            clean_seed = seed * 1_000_003 + scene
            if clean_images is not None:
                clean = clean_images[scene % len(clean_images)]
            else:
                clean = make_clean_image(clean_seed, image_size, image_size, channels)
            name = f"{i:04d}"
            rec = {
                "split": split,
                "index": i,
                "clean": f"{split.replace('_', '/')}/clean/{name}.png",
                "clean_seed": clean_seed,
            }
            write_png(os.path.join(out_dir, rec["clean"]), clean, bit_depth=16)
            if split.startswith("source"):
                degraded = apply_psf_patchwise(clean, bank, grid)
            else:
                maps_seed = seed * 2_000_003 + scene
                maps = synthesize_glare_fields(maps_seed, (map_res, map_res), glare_strength)
                rec["maps"] = f"{split.replace('_', '/')}/maps/{name}.bin"
                rec["maps_seed"] = maps_seed
                maps.save(os.path.join(out_dir, rec["maps"]), {"seed": maps_seed})
                degraded = compose_degradation(clean, bank, grid, maps)
            rec["degraded"] = f"{split.replace('_', '/')}/degraded/{name}.png"
            write_png(os.path.join(out_dir, rec["degraded"]), degraded, bit_depth=16)
            records.append(rec)
            scene += 1

    manifest_path = os.path.join(out_dir, "dataset_manifest.jsonl")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def read_dataset_manifest(dataset_dir) -> list:
    path = os.path.join(dataset_dir, "dataset_manifest.jsonl")
    if not os.path.exists(path):
        raise ValidationError(f"no dataset manifest at {path}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def load_split(dataset_dir, split: str, limit: int | None = None) -> dict:
    """Images (and maps where present) for one split, ordered by index.

    Returns a dict with ``clean``, ``degraded``, and optionally ``maps``
    lists. ``limit`` truncates, which is how data-efficiency sweeps restrict
    the unpaired target corpus.
    """
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}")
    records = [r for r in read_dataset_manifest(dataset_dir) if r["split"] == split]
    records.sort(key=lambda r: r["index"])
    if limit is not None:
        records = records[:limit]
    out = {"clean": [], "degraded": [], "records": records}
    if any("maps" in r for r in records):
        out["maps"] = []
    for rec in records:
        out["clean"].append(read_png(os.path.join(dataset_dir, rec["clean"])))
        out["degraded"].append(read_png(os.path.join(dataset_dir, rec["degraded"])))
        if "maps" in out:
            out["maps"].append(GlareMaps.load(os.path.join(dataset_dir, rec["maps"])))
    return out


def load_optics(dataset_dir, image_size: int):
    bank = PSFBank.load(os.path.join(dataset_dir, "optics.bin"))
    grid = PatchGrid(image_size, image_size, bank.grid_rows, bank.grid_cols)
    return bank, grid
