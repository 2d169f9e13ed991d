"""Offline paired-data generation with the trained generator.

For each record: extract latent maps from an unpaired target image at the
reference timestep, run the blended sampling loop conditioned on a clean
image and those maps, decode, and persist the (clean, degraded) pair with
everything needed to regenerate it bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .degradation import GlareMaps
from .diffusion import NoiseSchedule, q_sample, sample_loop, strided_schedule
from .errors import ValidationError
from .networks import MapPredictor, predict_latent_maps
from .storage import read_png, write_png


@dataclass(frozen=True)
class ManifestRecord:
    clean_path: str
    degraded_path: str
    target_source_path: str
    maps_path: str
    seed: int
    w: float
    t_star: int
    schedule_id: str
    generator_checkpoint_id: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "ManifestRecord":
        return ManifestRecord(**json.loads(line))


def schedule_id(sched: NoiseSchedule) -> str:
    h = hashlib.sha256()
    h.update(sched.beta.tobytes())
    h.update(sched.timestep_map.tobytes())
    return h.hexdigest()[:16]


def extract_maps(
    target_degraded: np.ndarray,
    lotgmp: MapPredictor,
    codec,
    sched: NoiseSchedule,
    t_star: int,
    seed: int,
) -> GlareMaps:
    """Latent maps from an unpaired target image.

    At ``t_star = 0`` no noise is added (the noising is a pass-through), so
    the result is independent of the seed.
    """
    if t_star < 0:
        raise ValidationError(f"t_star must be >= 0, got {t_star}")
    z_ref = codec.encode(target_degraded)
    if t_star == 0:
        z_t = z_ref
    else:
        eps = np.random.default_rng(seed).standard_normal(z_ref.shape)
        z_t = q_sample(z_ref, t_star, eps, sched)
    return predict_latent_maps(lotgmp, z_t, z_ref, t_star)


def generate_pair(
    clean: np.ndarray,
    maps: GlareMaps,
    denoiser,
    codec,
    sched: NoiseSchedule,
    w: float,
    seed: int,
) -> np.ndarray:
    """Sample a degraded counterpart of ``clean`` under the given maps.

    Runs the full blended reverse chain on ``sched`` (pass a strided
    sub-schedule for few-step sampling); the decode clamps to [0, 1].
    """
    z0 = sample_loop(denoiser, codec.encode(clean), maps, sched, w, seed)
    return codec.decode(z0)


def build_dataset(
    clean_images,
    clean_names,
    target_images,
    target_names,
    count: int,
    lotgmp: MapPredictor,
    denoiser,
    codec,
    sched: NoiseSchedule,
    sample_steps: int,
    w: float,
    t_star: int,
    base_seed: int,
    generator_checkpoint_id: str,
    out_dir,
) -> str:
    """Generate ``count`` records and write an atomic JSONL manifest.

    Record ``i`` pairs clean ``i % n_clean`` with target ``(i + i //
    n_clean) % n_target``: a diagonal round-robin, so equal-sized small
    corpora cycle through all combinations while distinct cleans still see
    distinct targets. Seeds are unique per record. On failure, partial
    outputs are removed.
    """
    if count < 0:
        raise ValidationError(f"count must be >= 0, got {count}")
    if count > 0 and (not clean_images or not target_images):
        raise ValidationError("both corpora must be non-empty")
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("clean", "degraded", "maps"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    sample_sched = strided_schedule(sched, sample_steps) if sample_steps < sched.T_steps else sched
    sid = schedule_id(sample_sched)
    manifest_path = os.path.join(out_dir, "pairs_manifest.jsonl")
    tmp_path = manifest_path + ".tmp"
    written = []
    try:
        with open(tmp_path, "w") as f:
            for i in range(count):
                ci = i % len(clean_images)
                ti = (i + i // len(clean_images)) % len(target_images)
                record_seed = base_seed + i
                maps = extract_maps(
                    target_images[ti], lotgmp, codec, sched, t_star, record_seed
                )
                degraded = generate_pair(
                    clean_images[ci], maps, denoiser, codec, sample_sched, w, record_seed
                )
                rec = ManifestRecord(
                    clean_path=f"clean/{i:04d}.png",
                    degraded_path=f"degraded/{i:04d}.png",
                    target_source_path=target_names[ti],
                    maps_path=f"maps/{i:04d}.bin",
                    seed=record_seed,
                    w=w,
                    t_star=t_star,
                    schedule_id=sid,
                    generator_checkpoint_id=generator_checkpoint_id,
                )
                clean_file = os.path.join(out_dir, rec.clean_path)
                degraded_file = os.path.join(out_dir, rec.degraded_path)
                maps_file = os.path.join(out_dir, rec.maps_path)
                write_png(clean_file, clean_images[ci], bit_depth=16)
                write_png(degraded_file, degraded, bit_depth=16)
                maps.save(maps_file, {"record_seed": record_seed, "source": target_names[ti]})
                written += [clean_file, degraded_file, maps_file]
                f.write(rec.to_json() + "\n")
        os.replace(tmp_path, manifest_path)
    except Exception:
        for path in written:
            if os.path.exists(path):
                os.remove(path)
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return manifest_path


def load_manifest(manifest_path) -> list:
    with open(manifest_path) as f:
        return [ManifestRecord.from_json(line) for line in f if line.strip()]


def load_pairs(manifest_path):
    """(clean, degraded, maps) triples referenced by a manifest."""
    root = os.path.dirname(manifest_path)
    out = []
    for rec in load_manifest(manifest_path):
        out.append(
            (
                read_png(os.path.join(root, rec.clean_path)),
                read_png(os.path.join(root, rec.degraded_path)),
                GlareMaps.load(os.path.join(root, rec.maps_path)),
            )
        )
    return out


def verify_manifest(manifest_path) -> None:
    """Check every referenced file exists and round-trips; seeds unique."""
    root = os.path.dirname(manifest_path)
    records = load_manifest(manifest_path)
    seeds = [r.seed for r in records]
    if len(set(seeds)) != len(seeds):
        raise ValidationError("manifest seeds are not unique")
    for rec in records:
        for rel in (rec.clean_path, rec.degraded_path):
            path = os.path.join(root, rel)
            if not os.path.exists(path):
                raise ValidationError(f"manifest references missing file {rel}")
            read_png(path)
        maps_path = os.path.join(root, rec.maps_path)
        if not os.path.exists(maps_path):
            raise ValidationError(f"manifest references missing file {rec.maps_path}")
        GlareMaps.load(maps_path)
