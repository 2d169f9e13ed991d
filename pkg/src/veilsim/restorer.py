"""Stage III: the restoration network and its two-phase training.

Phase 1 pretrains on paired aberration-only source data (reconstruction
only). Phase 2 fine-tunes on a 1:1 per-batch mix of generated compound
pairs and source pairs: the compound half adds the reversibility term
(estimated maps must reproduce the observed degradation through the frozen
forward degrader), the source half gently pins the estimated maps to the
identity (1, 0).
"""

from __future__ import annotations

import math
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError
from .modulation import tensors_to_maps
from .networks import DegradationNet, RestorationNet, save_checkpoint, tensor_to_image
from .storage import write_png
from .trainutil import aligned_crop_origin, cosine_lr, set_lr, to_batch, write_loss_csv


class PerceptualProxy(nn.Module):
    """Fixed, seeded random-convolution feature stack.

    A dependency-free stand-in for a pretrained perceptual network: three
    frozen random conv stages whose feature distances respond to structure,
    not just per-pixel offsets.
    """

    def __init__(self, channels: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [channels, 16, 24, 32]
        self.convs = nn.ModuleList()
        for cin, cout in zip(widths[:-1], widths[1:]):
            conv = nn.Conv2d(cin, cout, 5, stride=2, padding=2, bias=False)
            with torch.no_grad():
                fan_in = cin * 25
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in)
                )
            conv.weight.requires_grad_(False)
            self.convs.append(conv)

    def features(self, x):
        out = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            out.append(h)
        return out

    def distance(self, a, b):
        total = 0.0
        for fa, fb in zip(self.features(a), self.features(b)):
            total = total + (fa - fb).abs().mean()
        return total


def reconstruction_loss(restored, clean, proxy: PerceptualProxy | None = None, lambda_perc: float = 0.1):
    """Pixel L1 plus the weighted perceptual-proxy feature distance."""
    if restored.shape != clean.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(restored.shape)} vs {tuple(clean.shape)}"
        )
    loss = (restored - clean).abs().mean()
    if proxy is not None and lambda_perc > 0.0:
        loss = loss + lambda_perc * proxy.distance(restored, clean)
    return loss


def reversibility_loss(clean_gt, maps_hat, degraded_input, frozen_ddn: DegradationNet):
    """L1 between the frozen degrader applied to (clean GT, estimated maps)
    and the observed degraded input.

    Gradients reach only the producer of ``maps_hat``: the degrader's
    parameters are frozen and the clean/degraded tensors are data.
    """
    trans, glare = maps_hat
    redegraded = frozen_ddn(clean_gt, trans, glare)
    return (redegraded - degraded_input).abs().mean()


def _flip(rng: np.random.Generator, arrays):
    if rng.random() < 0.5:
        arrays = [a[:, ::-1] for a in arrays]
    if rng.random() < 0.5:
        arrays = [a[::-1, :] for a in arrays]
    return [np.ascontiguousarray(a) for a in arrays]


def _sample_pairs(rng, pairs, count, crop, augment=True):
    degs, cleans = [], []
    for i in rng.integers(0, len(pairs), size=count):
        clean, degraded = pairs[i]
        h, w = clean.shape[:2]
        y0, x0 = aligned_crop_origin(rng, h, w, crop)
        c = clean[y0 : y0 + crop, x0 : x0 + crop]
        d = degraded[y0 : y0 + crop, x0 : x0 + crop]
        if augment:
            c, d = _flip(rng, [c, d])
        cleans.append(c)
        degs.append(d)
    return to_batch(degs), to_batch(cleans)


def train_phase1(source_pairs, cfg, out_dir, seed: int):
    """Aberration-correction pretraining on paired source data."""
    if not source_pairs:
        raise ConfigurationError("phase 1 needs a non-empty source corpus")
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(seed)
    net = RestorationNet(channels=source_pairs[0][0].shape[2], base=cfg.base_width)
    proxy = PerceptualProxy(channels=source_pairs[0][0].shape[2], seed=0)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr_phase1)
    rng = np.random.default_rng(seed + 1)
    crop = min(cfg.crop, source_pairs[0][0].shape[0])
    rows = []
    for it in range(cfg.phase1_iters):
        set_lr(optimizer, cosine_lr(it, cfg.phase1_iters, cfg.lr_phase1, cfg.lr_end))
        degraded, clean = _sample_pairs(rng, source_pairs, cfg.batch_size, crop)
        restored, _ = net(degraded)
        loss = reconstruction_loss(restored, clean, proxy, cfg.lambda_perc)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        rows.append((it, f"{float(loss.detach()):.6f}"))
    save_checkpoint(
        os.path.join(out_dir, "restorer_phase1.ckpt"), net, {"seed": seed, "phase": 1}
    )
    write_loss_csv(os.path.join(out_dir, "loss_phase1.csv"), rows)
    return net, rows


def train_phase2(
    net: RestorationNet,
    synthetic_pairs,
    source_pairs,
    frozen_ddn: DegradationNet | None,
    cfg,
    out_dir,
    seed: int,
):
    """Hybrid fine-tuning with the reversibility constraint.

    Per batch: half generated compound pairs (reconstruction + weighted
    reversibility) and half source pairs (reconstruction + identity-map
    pinning). With ``lambda_rev = 0`` the reversibility term is skipped
    entirely, reducing bit-exactly to plain fine-tuning.
    """
    if not synthetic_pairs or not source_pairs:
        raise ConfigurationError("phase 2 needs both synthetic and source pairs")
    if cfg.lambda_rev > 0.0 and frozen_ddn is None:
        raise ConfigurationError("lambda_rev > 0 requires a frozen forward degrader")
    os.makedirs(out_dir, exist_ok=True)
    proxy = PerceptualProxy(channels=source_pairs[0][0].shape[2], seed=0)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr_phase2)
    rng = np.random.default_rng(seed + 2)
    half = max(cfg.batch_size // 2, 1)
    crop = min(cfg.crop, synthetic_pairs[0][0].shape[0], source_pairs[0][0].shape[0])
    rows = []
    for it in range(cfg.phase2_iters):
        set_lr(optimizer, cosine_lr(it, cfg.phase2_iters, cfg.lr_phase2, cfg.lr_end))
        syn_deg, syn_clean = _sample_pairs(rng, synthetic_pairs, half, crop)
        src_deg, src_clean = _sample_pairs(rng, source_pairs, half, crop)

        restored_syn, maps_syn = net(syn_deg)
        loss_syn = reconstruction_loss(restored_syn, syn_clean, proxy, cfg.lambda_perc)
        if cfg.lambda_rev > 0.0:
            loss_syn = loss_syn + cfg.lambda_rev * reversibility_loss(
                syn_clean, maps_syn, syn_deg, frozen_ddn
            )

        restored_src, (trans_src, glare_src) = net(src_deg)
        loss_src = reconstruction_loss(restored_src, src_clean, proxy, cfg.lambda_perc)
        if cfg.lambda_source_maps > 0.0:
            pin = (trans_src - 1.0).abs().mean() + glare_src.abs().mean()
            loss_src = loss_src + cfg.lambda_source_maps * pin

        loss = 0.5 * (loss_syn + loss_src)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        rows.append((it, f"{float(loss.detach()):.6f}"))
    save_checkpoint(
        os.path.join(out_dir, "restorer_phase2.ckpt"), net, {"seed": seed, "phase": 2}
    )
    write_loss_csv(os.path.join(out_dir, "loss_phase2.csv"), rows)
    return net, rows


def restore_image(net: RestorationNet, degraded: np.ndarray):
    """Single-image restoration; returns (restored, estimated maps)."""
    with torch.no_grad():
        restored, (trans, glare) = net(to_batch([degraded]))
    return tensor_to_image(restored), tensors_to_maps(trans, glare)


def dump_inspection(net: RestorationNet, degraded: np.ndarray, out_dir) -> None:
    """PNG dumps of estimated maps and pre/post-compensation features."""
    os.makedirs(out_dir, exist_ok=True)
    captured = {}
    with torch.no_grad():
        _, (trans, glare) = net(to_batch([degraded]), features=captured)
    write_png(os.path.join(out_dir, "maps_trans.png"), trans[0, 0].numpy()[:, :, None])
    write_png(os.path.join(out_dir, "maps_glare.png"), glare[0, 0].numpy()[:, :, None])
    for name, feats in captured.items():
        grid = _feature_grid(feats[0])
        write_png(os.path.join(out_dir, f"{name}.png"), grid[:, :, None])


def _feature_grid(feats: torch.Tensor, columns: int = 4, max_channels: int = 8) -> np.ndarray:
    chans = feats[:max_channels].numpy()
    chans = [(c - c.min()) / max(c.max() - c.min(), 1e-9) for c in chans]
    rows = []
    for i in range(0, len(chans), columns):
        row = chans[i : i + columns]
        while len(row) < columns:
            row.append(np.zeros_like(chans[0]))
        rows.append(np.concatenate(row, axis=1))
    return np.concatenate(rows, axis=0)
