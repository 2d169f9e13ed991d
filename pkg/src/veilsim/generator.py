"""Stage I: hybrid source/target diffusion training of the degradation generator.

Each optimizer step realizes one Bernoulli draw between the two domains:
with probability ``p_source`` a source batch (paired aberration-only data,
identity glare maps, clean-image conditioning) and otherwise a target batch
(unpaired compound images, maps predicted in-flight by the latent map
predictor, no clean conditioning). The expectation over draws is the
weighted two-domain objective.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule
from .errors import ValidationError
from .networks import (
    SOURCE_DOMAIN,
    TARGET_DOMAIN,
    MapPredictor,
    NoisePredictor,
    save_checkpoint,
)
from .trainutil import aligned_crop_origin, to_batch, write_loss_csv

SOURCE = "source"
TARGET = "target"


@dataclass
class HybridBatch:
    """One realized training batch; exactly one branch's payload is present."""

    branch: str
    t: np.ndarray
    eps: np.ndarray
    clean: np.ndarray | None = None
    degraded_source: np.ndarray | None = None
    degraded_target: np.ndarray | None = None

    def __post_init__(self):
        if self.branch == SOURCE:
            ok = (
                self.clean is not None
                and self.degraded_source is not None
                and self.degraded_target is None
            )
        elif self.branch == TARGET:
            ok = (
                self.degraded_target is not None
                and self.clean is None
                and self.degraded_source is None
            )
        else:
            raise ValidationError(f"unknown branch {self.branch!r}")
        if not ok:
            raise ValidationError(f"{self.branch} batch carries the wrong payload")


def _encode_batch(codec, images: np.ndarray) -> torch.Tensor:
    latents = [codec.encode(img) for img in images]
    return to_batch(latents)


def _noise_to(z0: torch.Tensor, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule):
    abar = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)[
        torch.as_tensor(t, dtype=torch.long) - 1
    ].view(-1, 1, 1, 1)
    eps_t = torch.as_tensor(np.asarray(eps, dtype=np.float32))
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * eps_t, eps_t


def source_loss(
    batch: HybridBatch, denoiser: NoisePredictor, codec, sched: NoiseSchedule
) -> torch.Tensor:
    """Noise-prediction MSE on the source branch.

    The noised variable is the aberration-only degraded latent; conditioning
    is its clean counterpart plus identity maps (1, 0), which pass through
    the modulation stage as an exact no-op.
    """
    if batch.branch != SOURCE:
        raise ValidationError(f"source_loss needs a source batch, got {batch.branch!r}")
    z0 = _encode_batch(codec, batch.degraded_source)
    z_t, eps_t = _noise_to(z0, batch.t, batch.eps, sched)
    clean_cond = _encode_batch(codec, batch.clean)
    ones = torch.ones(z_t.shape[0], 1, z_t.shape[2], z_t.shape[3])
    zeros = torch.zeros_like(ones)
    pred = denoiser(
        z_t,
        torch.as_tensor(batch.t, dtype=torch.long),
        clean_cond=clean_cond,
        trans=ones,
        glare=zeros,
        domain=SOURCE_DOMAIN,
    )
    return F.mse_loss(pred, eps_t)


def target_loss(
    batch: HybridBatch,
    denoiser: NoisePredictor,
    lotgmp: MapPredictor,
    codec,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Noise-prediction MSE on the target branch.

    Maps come from the map predictor given the noisy latent, the target
    latent, and the timestep; gradients flow into both networks. The clean
    condition is nulled (all zeros inside the denoiser).
    """
    if batch.branch != TARGET:
        raise ValidationError(f"target_loss needs a target batch, got {batch.branch!r}")
    z_ref = _encode_batch(codec, batch.degraded_target)
    z_t, eps_t = _noise_to(z_ref, batch.t, batch.eps, sched)
    trans, glare = lotgmp(z_t, z_ref, torch.as_tensor(batch.t, dtype=torch.long))
    pred = denoiser(
        z_t,
        torch.as_tensor(batch.t, dtype=torch.long),
        clean_cond=None,
        trans=trans,
        glare=glare,
        domain=TARGET_DOMAIN,
    )
    return F.mse_loss(pred, eps_t)


class HybridSampler:
    """Deterministic stream of hybrid batches from in-memory corpora."""

    def __init__(
        self,
        source_pairs,  # list of (clean, degraded_aberration_only)
        target_images,  # list of compound degraded images
        codec,
        sched: NoiseSchedule,
        batch_size: int,
        crop: int,
        p_source: float,
        seed: int,
    ):
        if not 0.0 <= p_source <= 1.0:
            raise ValidationError(f"p_source must be in [0, 1], got {p_source}")
        if not source_pairs or not target_images:
            raise ValidationError("both corpora must be non-empty")
        self.source_pairs = source_pairs
        self.target_images = target_images
        self.codec = codec
        self.sched = sched
        self.batch_size = batch_size
        self.crop = crop
        self.p_source = p_source
        self.rng = np.random.default_rng(seed)
        self.align = codec.downscale

    def _crops(self, images):
        out = []
        for img in images:
            h, w = img.shape[:2]
            y0, x0 = aligned_crop_origin(self.rng, h, w, self.crop, self.align)
            out.append(img[y0 : y0 + self.crop, x0 : x0 + self.crop])
        return out

    def _paired_crops(self, pairs):
        cleans, degradeds = [], []
        for clean, degraded in pairs:
            h, w = clean.shape[:2]
            y0, x0 = aligned_crop_origin(self.rng, h, w, self.crop, self.align)
            cleans.append(clean[y0 : y0 + self.crop, x0 : x0 + self.crop])
            degradeds.append(degraded[y0 : y0 + self.crop, x0 : x0 + self.crop])
        return np.stack(cleans), np.stack(degradeds)

    def next_batch(self) -> HybridBatch:
        branch = SOURCE if self.rng.random() < self.p_source else TARGET
        t = self.rng.integers(1, self.sched.T_steps + 1, size=self.batch_size)
        latent_side = self.crop // self.codec.downscale
        eps = self.rng.standard_normal(
            (self.batch_size, self.codec.latent_channels, latent_side, latent_side)
        )
        if branch == SOURCE:
            idx = self.rng.integers(0, len(self.source_pairs), size=self.batch_size)
            clean, degraded = self._paired_crops([self.source_pairs[i] for i in idx])
            return HybridBatch(
                branch=SOURCE, t=t, eps=eps, clean=clean, degraded_source=degraded
            )
        idx = self.rng.integers(0, len(self.target_images), size=self.batch_size)
        degraded = np.stack(self._crops([self.target_images[i] for i in idx]))
        return HybridBatch(branch=TARGET, t=t, eps=eps, degraded_target=degraded)


def hybrid_step(
    batch: HybridBatch,
    denoiser: NoisePredictor,
    lotgmp: MapPredictor,
    codec,
    sched: NoiseSchedule,
    optimizer,
) -> float:
    """One optimizer step on the realized branch's loss."""
    if batch.branch == SOURCE:
        loss = source_loss(batch, denoiser, codec, sched)
    else:
        loss = target_loss(batch, denoiser, lotgmp, codec, sched)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_generator(
    source_pairs,
    target_images,
    codec,
    sched: NoiseSchedule,
    cfg,
    out_dir,
    seed: int,
):
    """Run the hybrid training loop; returns (denoiser, lotgmp, loss_rows)."""
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(seed)
    denoiser = NoisePredictor(
        channels=codec.latent_channels, base=cfg.base_width, emb_dim=cfg.emb_dim
    )
    lotgmp = MapPredictor(channels=codec.latent_channels, emb_dim=cfg.emb_dim)
    optimizer = torch.optim.AdamW(
        list(denoiser.parameters()) + list(lotgmp.parameters()),
        lr=cfg.lr,
        weight_decay=1e-4,
    )
    sampler = HybridSampler(
        source_pairs,
        target_images,
        codec,
        sched,
        batch_size=cfg.batch_size,
        crop=cfg.crop,
        p_source=cfg.p_source,
        seed=seed + 1,
    )
    rows = []
    for it in range(cfg.iters):
        batch = sampler.next_batch()
        loss = hybrid_step(batch, denoiser, lotgmp, codec, sched, optimizer)
        rows.append((it, batch.branch, f"{loss:.6f}"))

    save_checkpoint(
        os.path.join(out_dir, "denoiser.ckpt"), denoiser, {"seed": seed, "steps": cfg.iters}
    )
    save_checkpoint(
        os.path.join(out_dir, "lotgmp.ckpt"), lotgmp, {"seed": seed, "steps": cfg.iters}
    )
    write_loss_csv(os.path.join(out_dir, "loss.csv"), rows, header=("iter", "branch", "loss"))
    return denoiser, lotgmp, rows
