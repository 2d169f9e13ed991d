"""Stage II: distill the multi-step generator into a one-pass degrader.

Teacher outputs are precomputed offline (the pairs stage); the sampler is
never invoked inside the distillation loop. After training the network is
frozen and serves as the forward model for the reversibility constraint.
"""

from __future__ import annotations

import csv
import os
import time

import numpy as np
import torch

from .degradation import GlareMaps
from .errors import ValidationError
from .modulation import maps_to_tensors
from .networks import DegradationNet, save_checkpoint, tensor_to_image
from .trainutil import aligned_crop_origin, cosine_lr, set_lr, to_batch, write_loss_csv


def distill_step(
    ddn: DegradationNet,
    optimizer,
    clean: torch.Tensor,
    trans: torch.Tensor,
    glare: torch.Tensor,
    teacher_output: torch.Tensor,
) -> float:
    """One L1 regression step of the student onto a cached teacher output."""
    if teacher_output.shape != clean.shape:
        raise ValidationError(
            f"teacher shape {tuple(teacher_output.shape)} does not match "
            f"clean shape {tuple(clean.shape)}"
        )
    out = ddn(clean, trans, glare)
    loss = (out - teacher_output).abs().mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def run_ddn(ddn: DegradationNet, clean: np.ndarray, maps: GlareMaps) -> np.ndarray:
    """Deterministic single forward pass on one image."""
    with torch.no_grad():
        x = to_batch([clean])
        zt, zg = maps_to_tensors(maps)
        out = ddn(x, zt, zg)
    return tensor_to_image(out)


def train_ddn(triples, cfg, out_dir, seed: int, map_align: int = 4):
    """Fit the student on (clean, maps, teacher) triples.

    Crop origins are snapped to the map resolution ratio so image crops and
    map crops stay in exact correspondence. Returns (ddn, loss_rows).
    """
    if not triples:
        raise ValidationError("distillation needs a non-empty pair set")
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(seed)
    ddn = DegradationNet(channels=triples[0][0].shape[2], base=cfg.base_width)
    optimizer = torch.optim.Adam(ddn.parameters(), lr=cfg.lr_start)
    rng = np.random.default_rng(seed + 1)

    h, w = triples[0][0].shape[:2]
    ratio = h // triples[0][1].resolution[0]
    crop = min(cfg.crop, h)
    rows = []
    for it in range(cfg.iters):
        set_lr(optimizer, cosine_lr(it, cfg.iters, cfg.lr_start, cfg.lr_end))
        idx = rng.integers(0, len(triples), size=cfg.batch_size)
        cleans, transs, glares, teachers = [], [], [], []
        for i in idx:
            clean, maps, teacher = triples[i]
            y0, x0 = aligned_crop_origin(rng, h, w, crop, align=ratio)
            cleans.append(clean[y0 : y0 + crop, x0 : x0 + crop])
            teachers.append(teacher[y0 : y0 + crop, x0 : x0 + crop])
            my0, mx0, mc = y0 // ratio, x0 // ratio, crop // ratio
            transs.append(maps.z_trans[my0 : my0 + mc, mx0 : mx0 + mc])
            glares.append(maps.z_glare[my0 : my0 + mc, mx0 : mx0 + mc])
        loss = distill_step(
            ddn,
            optimizer,
            to_batch(cleans),
            torch.as_tensor(np.stack(transs), dtype=torch.float32)[:, None],
            torch.as_tensor(np.stack(glares), dtype=torch.float32)[:, None],
            to_batch(teachers),
        )
        rows.append((it, f"{loss:.6f}"))

    save_checkpoint(os.path.join(out_dir, "ddn.ckpt"), ddn, {"seed": seed, "steps": cfg.iters})
    write_loss_csv(os.path.join(out_dir, "loss.csv"), rows)
    return ddn, rows


def freeze(ddn: DegradationNet) -> DegradationNet:
    ddn.eval()
    for p in ddn.parameters():
        p.requires_grad_(False)
    return ddn


def benchmark_forward_models(
    ddn: DegradationNet,
    denoiser,
    codec,
    sample_sched,
    maps: GlareMaps,
    image: np.ndarray,
    w: float,
    reps: int,
    out_csv,
) -> dict:
    """Wall-clock one student pass against the multi-step teacher.

    Also records the L1 gap between the two outputs. Returns the summary
    row that was written.
    """
    from .pairs import generate_pair

    # warm-up excluded from timing
    run_ddn(ddn, image, maps)
    t0 = time.perf_counter()
    for _ in range(reps):
        student_out = run_ddn(ddn, image, maps)
    student_s = (time.perf_counter() - t0) / reps

    generate_pair(image, maps, denoiser, codec, sample_sched, w, seed=0)
    t0 = time.perf_counter()
    teacher_out = generate_pair(image, maps, denoiser, codec, sample_sched, w, seed=0)
    teacher_s = time.perf_counter() - t0

    summary = {
        "teacher_s": teacher_s,
        "student_s": student_s,
        "speedup": teacher_s / student_s,
        "l1": float(np.abs(np.clip(student_out, 0, 1) - teacher_out).mean()),
    }
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["teacher_s", "student_s", "speedup", "l1"])
        writer.writerow(
            [
                f"{summary['teacher_s']:.6f}",
                f"{summary['student_s']:.6f}",
                f"{summary['speedup']:.2f}",
                f"{summary['l1']:.6f}",
            ]
        )
    return summary
