"""Network building blocks: noise predictor, map predictors, codecs.

Everything here is deliberately small (desk-scale widths, one downsample);
the architecture is plumbing, not the point. Map-emitting heads squash
their logits so range invariants hold for any input by construction.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .degradation import EPSILON_T, GlareMaps
from .errors import ValidationError
from .modulation import compensate_glare, impose_glare, maps_to_tensors, tensors_to_maps
from .storage import read_container, write_container

SOURCE_DOMAIN = 0
TARGET_DOMAIN = 1

# zero logits land at the midpoints of the squashed output ranges
MAP_TRANS_MIDPOINT = EPSILON_T + (1.0 - EPSILON_T) * 0.5
MAP_GLARE_MIDPOINT = (1.0 - EPSILON_T) * 0.5


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos timestep features for integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """Residual block with optional scale-shift embedding injection.

    Multiplicative conditioning matters here: noise prediction needs
    t-dependent rescaling of the signal path, which a bias-only injection
    cannot express.
    """

    def __init__(self, channels: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * channels) if emb_dim else None
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.norm2(h)
        if self.emb_proj is not None and emb is not None:
            scale, shift = self.emb_proj(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
            h = h * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return x + h


class Downsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class MapHead(nn.Module):
    """Two-channel conv head squashed into the legal map ranges."""

    def __init__(self, in_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, 2, 3, padding=1)

    def forward(self, x):
        logits = self.conv(x)
        trans = EPSILON_T + (1.0 - EPSILON_T) * torch.sigmoid(logits[:, 0:1])
        glare = (1.0 - EPSILON_T) * torch.sigmoid(logits[:, 1:2])
        return trans, glare


def _zero_init(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class NoisePredictor(nn.Module):
    """Encoder-bottleneck-decoder noise estimator with glare-map injection.

    Conditions: an optional content latent (concatenated; an absent condition
    is encoded as all zeros), optional transmission/glare maps injected by
    forward modulation at the encoder/bottleneck interface, a sinusoidal
    timestep embedding, and a learned source/target domain embedding added to
    it (the stand-in for per-domain text prompts).
    """

    def __init__(self, channels: int = 3, base: int = 32, emb_dim: int = 64):
        super().__init__()
        self.channels = channels
        self.base = base
        self.emb_dim = emb_dim
        wide = base * 2
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.domain_embed = nn.Embedding(2, emb_dim)
        self.conv_in = nn.Conv2d(2 * channels, base, 3, padding=1)
        self.enc1 = ResBlock(base, emb_dim)
        self.down = Downsample(base, wide)
        self.enc2 = ResBlock(wide, emb_dim)
        self.enc3 = ResBlock(wide, emb_dim)
        self.mid1 = ResBlock(wide, emb_dim)
        self.mid2 = ResBlock(wide, emb_dim)
        self.dec1 = ResBlock(wide, emb_dim)
        self.up = Upsample(wide, base)
        self.dec2 = ResBlock(base, emb_dim)
        self.dec3 = ResBlock(base, emb_dim)
        self.norm_out = nn.GroupNorm(8, base)
        self.conv_out = _zero_init(nn.Conv2d(base, channels, 3, padding=1))

    def arch_config(self):
        return {"channels": self.channels, "base": self.base, "emb_dim": self.emb_dim}

    def forward(self, z_t, t, clean_cond=None, trans=None, glare=None, domain=SOURCE_DOMAIN):
        if clean_cond is None:
            clean_cond = torch.zeros_like(z_t)
        if isinstance(t, int):
            t = torch.full((z_t.shape[0],), t, dtype=torch.long, device=z_t.device)
        if isinstance(domain, int):
            domain = torch.full((z_t.shape[0],), domain, dtype=torch.long, device=z_t.device)
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim)) + self.domain_embed(domain)

        x = self.conv_in(torch.cat([z_t, clean_cond], dim=1))
        e1 = self.enc1(x, emb)
        h = self.down(e1)
        h = self.enc2(h, emb)
        h = self.enc3(h, emb)
        if trans is not None:
            h = impose_glare(h, trans, glare)
        h = self.mid1(h, emb)
        h = self.mid2(h, emb)
        h = self.dec1(h, emb)
        h = self.up(h) + e1
        h = self.dec2(h, emb)
        h = self.dec3(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class MapPredictor(nn.Module):
    """Time-aware latent map estimator from (noisy latent, target latent, t).

    Maps come out at 1/8 of the latent resolution: the physical fields are
    smooth and low-frequency, and the coarse grid denies the predictor the
    bandwidth to smuggle image content through the map channels instead of
    encoding transmission and glare.
    """

    def __init__(self, channels: int = 3, base: int = 24, emb_dim: int = 64):
        super().__init__()
        self.channels = channels
        self.base = base
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(2 * channels, base, 3, padding=1)
        self.block1 = ResBlock(base, emb_dim)
        self.down1 = Downsample(base, base * 2)
        self.block2 = ResBlock(base * 2, emb_dim)
        self.down2 = Downsample(base * 2, base * 2)
        self.block3 = ResBlock(base * 2, emb_dim)
        self.down3 = Downsample(base * 2, base * 2)
        self.block4 = ResBlock(base * 2, emb_dim)
        self.head = MapHead(base * 2)

    def arch_config(self):
        return {"channels": self.channels, "base": self.base, "emb_dim": self.emb_dim}

    def forward(self, z_t, z_target, t):
        if isinstance(t, int):
            t = torch.full((z_t.shape[0],), t, dtype=torch.long, device=z_t.device)
        emb = self.time_mlp(sinusoidal_embedding(t, self.emb_dim))
        h = self.conv_in(torch.cat([z_t, z_target], dim=1))
        h = self.block1(h, emb)
        h = self.down1(h)
        h = self.block2(h, emb)
        h = self.down2(h)
        h = self.block3(h, emb)
        h = self.down3(h)
        h = self.block4(h, emb)
        return self.head(h)


class GlareEncoder(nn.Module):
    """Map estimator from a degraded image alone (no timestep input)."""

    def __init__(self, channels: int = 3, base: int = 24):
        super().__init__()
        self.channels = channels
        self.base = base
        self.conv_in = nn.Conv2d(channels, base, 3, padding=1)
        self.block1 = ResBlock(base)
        self.down1 = Downsample(base, base * 2)
        self.block2 = ResBlock(base * 2)
        self.down2 = Downsample(base * 2, base * 2)
        self.block3 = ResBlock(base * 2)
        self.head = MapHead(base * 2)

    def arch_config(self):
        return {"channels": self.channels, "base": self.base}

    def forward(self, degraded):
        h = self.conv_in(degraded)
        h = self.block1(h)
        h = self.down1(h)
        h = self.block2(h)
        h = self.down2(h)
        h = self.block3(h)
        return self.head(h)


class DegradationNet(nn.Module):
    """One-pass forward degrader distilled from the diffusion generator.

    Predicts a correction on top of the image-space scattering of its input,
    so with zero-initialized heads the untrained network *is* the physical
    scattering model (and the identity when given maps (1, 0)).
    """

    def __init__(self, channels: int = 3, base: int = 24):
        super().__init__()
        self.channels = channels
        self.base = base
        wide = base * 2
        self.conv_in = nn.Conv2d(channels, base, 3, padding=1)
        self.enc = ResBlock(base)
        self.down = Downsample(base, wide)
        self.block_pre = ResBlock(wide)
        self.block_post = ResBlock(wide)
        self.up = Upsample(wide, base)
        self.dec = ResBlock(base)
        self.conv_out = _zero_init(nn.Conv2d(base, channels, 3, padding=1))

    def arch_config(self):
        return {"channels": self.channels, "base": self.base}

    def forward(self, clean, trans, glare):
        base_img = impose_glare(clean, trans, glare)
        h = self.conv_in(clean)
        h = self.enc(h)
        h = self.down(h)
        h = self.block_pre(h)
        h = impose_glare(h, trans, glare)
        h = self.block_post(h)
        h = self.up(h)
        h = self.dec(h)
        return base_img + self.conv_out(h)

    def forward_maps(self, clean: torch.Tensor, maps: GlareMaps) -> torch.Tensor:
        zt, zg = maps_to_tensors(maps, device=clean.device, dtype=clean.dtype)
        return self.forward(clean, zt, zg)


class RestorationNet(nn.Module):
    """Restorer whose glare path is the structural inverse of the degrader.

    A glare-encoder head predicts latent maps from the degraded input; the
    encoder features are compensated (inverse modulation) with those maps
    before the bottleneck, then decoded with encoder skips. The final head
    is zero-initialized, so the untrained network is the identity.
    """

    def __init__(self, channels: int = 3, base: int = 32):
        super().__init__()
        self.channels = channels
        self.base = base
        wide = base * 2
        self.glare_enc = GlareEncoder(channels, base=24)
        self.conv_in = nn.Conv2d(channels, base, 3, padding=1)
        self.enc1 = ResBlock(base)
        self.down = Downsample(base, wide)
        self.enc2 = ResBlock(wide)
        self.mid1 = ResBlock(wide)
        self.mid2 = ResBlock(wide)
        self.dec1 = ResBlock(wide)
        self.up = Upsample(wide, base)
        self.dec2 = ResBlock(base)
        self.dec3 = ResBlock(base)
        self.conv_out = _zero_init(nn.Conv2d(base, channels, 3, padding=1))

    def arch_config(self):
        return {"channels": self.channels, "base": self.base}

    def forward(self, degraded, maps_override=None, bypass_compensation=False, features=None):
        """Returns ``(restored, (trans, glare))``.

        Pass a dict as ``features`` to capture the pre/post-compensation
        feature maps for inspection dumps.
        """
        if maps_override is not None:
            trans, glare = maps_override
            if trans.shape[0] == 1 and degraded.shape[0] > 1:
                trans = trans.expand(degraded.shape[0], -1, -1, -1)
                glare = glare.expand(degraded.shape[0], -1, -1, -1)
        else:
            trans, glare = self.glare_enc(degraded)
        e1 = self.enc1(self.conv_in(degraded))
        h = self.down(e1)
        h = self.enc2(h)
        if features is not None:
            features["pre_compensation"] = h.detach()
        if not bypass_compensation:
            h = compensate_glare(h, trans, glare)
        if features is not None:
            features["post_compensation"] = h.detach()
        h = self.mid1(h)
        h = self.mid2(h)
        h = self.dec1(h)
        h = self.up(h) + e1
        h = self.dec2(h)
        h = self.dec3(h)
        return degraded + self.conv_out(h), (trans, glare)


class PixelCodec:
    """Default latent codec: pixel space with an affine [0,1] -> [-1,1] map.

    ``decode`` clamps to [0, 1]; this is the only clamp inside the
    generation path.
    """

    downscale = 1

    def __init__(self, channels: int = 3):
        self.latent_channels = channels

    def encode(self, image: np.ndarray) -> np.ndarray:
        return 2.0 * np.asarray(image, dtype=np.float64) - 1.0

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(latent, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)

    def arch_config(self):
        return {"channels": self.latent_channels}


class ConvAutoencoder(nn.Module):
    """Optional 4x-downsampling codec exercising the latent-space path."""

    downscale = 4

    def __init__(self, channels: int = 3, latent_channels: int = 4, base: int = 32):
        super().__init__()
        self.channels = channels
        self.latent_channels = latent_channels
        self.base = base
        self.enc = nn.Sequential(
            nn.Conv2d(channels, base, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, base, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(base, latent_channels, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, base, 3, padding=1),
            nn.SiLU(),
            Upsample(base, base),
            nn.SiLU(),
            Upsample(base, base),
            nn.SiLU(),
            nn.Conv2d(base, channels, 3, padding=1),
        )

    def arch_config(self):
        return {
            "channels": self.channels,
            "latent_channels": self.latent_channels,
            "base": self.base,
        }

    def forward(self, x):
        return self.dec(self.enc(x))

    def encode(self, image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(image).transpose(2, 0, 1)[None], dtype=torch.float32)
            z = self.enc(2.0 * x - 1.0)
        return z[0].numpy().transpose(1, 2, 0).astype(np.float64)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            z = torch.as_tensor(np.asarray(latent).transpose(2, 0, 1)[None], dtype=torch.float32)
            x = self.dec(z)
        img = (x[0].numpy().transpose(1, 2, 0).astype(np.float64) + 1.0) / 2.0
        return np.clip(img, 0.0, 1.0)


def train_autoencoder(ae: ConvAutoencoder, images, iters: int, lr: float, seed: int):
    """Short reconstruction fit so the latent path carries real content."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    stack = torch.as_tensor(
        np.stack([np.asarray(im).transpose(2, 0, 1) for im in images]), dtype=torch.float32
    )
    stack = 2.0 * stack - 1.0
    losses = []
    for _ in range(iters):
        idx = torch.randint(0, stack.shape[0], (min(4, stack.shape[0]),), generator=gen)
        batch = stack[idx]
        out = ae(batch)
        loss = F.mse_loss(out, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    return losses


_REGISTRY = {
    "NoisePredictor": NoisePredictor,
    "MapPredictor": MapPredictor,
    "GlareEncoder": GlareEncoder,
    "DegradationNet": DegradationNet,
    "RestorationNet": RestorationNet,
    "ConvAutoencoder": ConvAutoencoder,
}


def save_checkpoint(path, module: nn.Module, header: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    meta = {"kind": type(module).__name__, "arch": module.arch_config()}
    meta.update(header or {})
    write_container(path, meta, arrays)


def load_checkpoint(path) -> nn.Module:
    header, arrays = read_container(path)
    kind = header.get("kind")
    if kind not in _REGISTRY:
        raise ValidationError(f"{path}: unknown checkpoint kind {kind!r}")
    module = _REGISTRY[kind](**header["arch"])
    state = {k: torch.as_tensor(v, dtype=torch.float32) for k, v in arrays.items()}
    module.load_state_dict(state)
    return module


def checkpoint_header(path) -> dict:
    header, _ = read_container(path)
    return header


def parameter_checksum(module: nn.Module) -> str:
    """Order-stable digest of all parameters and buffers."""
    h = hashlib.sha256()
    for key, value in module.state_dict().items():
        h.update(key.encode("utf-8"))
        h.update(value.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def image_to_tensor(image: np.ndarray, device=None) -> torch.Tensor:
    """H,W,C float image to a (1, C, H, W) float32 tensor."""
    return torch.as_tensor(
        np.asarray(image, dtype=np.float32).transpose(2, 0, 1)[None], device=device
    )


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor back to an H,W,C float64 image (no clamping)."""
    return x.detach().cpu().double().numpy()[0].transpose(1, 2, 0)


def numpy_denoiser(net: NoisePredictor, content_domain: int = TARGET_DOMAIN):
    """Adapter giving the numpy callable the sampling loop expects.

    The map-conditioned branch always runs with the target-domain embedding.
    ``content_domain`` selects the embedding of the clean-conditioned branch:
    target when synthesizing compound pairs (content from the clean latent,
    degradation style from the domain embedding), source when sampling
    source-style data from a source-only generator. An absent clean
    condition becomes an all-zero latent.
    """

    def denoise(z_t, clean_cond, vg_cond, t):
        with torch.no_grad():
            z = torch.as_tensor(
                np.asarray(z_t, dtype=np.float32).transpose(2, 0, 1)[None]
            )
            clean = None
            if clean_cond is not None:
                clean = torch.as_tensor(
                    np.asarray(clean_cond, dtype=np.float32).transpose(2, 0, 1)[None]
                )
            if vg_cond is not None:
                zt, zg = maps_to_tensors(vg_cond)
                out = net(z, t, clean_cond=clean, trans=zt, glare=zg, domain=TARGET_DOMAIN)
            else:
                out = net(z, t, clean_cond=clean, domain=content_domain)
        return out[0].numpy().transpose(1, 2, 0).astype(np.float64)

    return denoise


def predict_latent_maps(predictor: MapPredictor, z_t: np.ndarray, z_target: np.ndarray, t: int) -> GlareMaps:
    """Numpy-facing wrapper around :class:`MapPredictor`."""
    with torch.no_grad():
        zt_in = torch.as_tensor(np.asarray(z_t, dtype=np.float32).transpose(2, 0, 1)[None])
        zr_in = torch.as_tensor(np.asarray(z_target, dtype=np.float32).transpose(2, 0, 1)[None])
        trans, glare = predictor(zt_in, zr_in, t)
    return tensors_to_maps(trans, glare)


def encode_glare(encoder: GlareEncoder, degraded: np.ndarray) -> GlareMaps:
    """Numpy-facing wrapper around :class:`GlareEncoder`."""
    with torch.no_grad():
        x = image_to_tensor(degraded)
        trans, glare = encoder(x)
    return tensors_to_maps(trans, glare)
