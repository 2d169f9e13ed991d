"""Feature-space glare modulation and its algebraic inverse (torch).

The forward module multiplies features by the transmission map and adds the
glare map, mirroring the image-space scattering model; the inverse module is
its exact algebraic mirror, so the two are mutually invertible wherever the
transmission stays above its floor.
"""

from __future__ import annotations

import torch

from .degradation import EPSILON_T, GlareMaps
from .errors import ValidationError


def resize_field(field: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Differentiable bilinear resize of (B, C, h, w) maps, lerp form.

    Matches :func:`veilsim.degradation.resize_bilinear` (pixel-center
    alignment); constants resize to exactly the same constant, which keeps
    identity maps exactly inert after resampling.
    """
    b, c, h, w = field.shape
    if (h, w) == (out_h, out_w):
        return field

    def axis(n_in, n_out, device):
        pos = (torch.arange(n_out, dtype=torch.float64, device=device) + 0.5) * (
            n_in / n_out
        ) - 0.5
        i0f = torch.floor(pos)
        frac = (pos - i0f).to(field.dtype)
        i0 = i0f.clamp(0, n_in - 1).long()
        i1 = (i0f + 1).clamp(0, n_in - 1).long()
        frac = torch.where(i0 == i1, torch.zeros_like(frac), frac)
        return i0, i1, frac

    y0, y1, wy = axis(h, out_h, field.device)
    x0, x1, wx = axis(w, out_w, field.device)
    r0 = field.index_select(2, y0)
    r1 = field.index_select(2, y1)
    rows = r0 + wy.view(1, 1, -1, 1) * (r1 - r0)
    c0 = rows.index_select(3, x0)
    c1 = rows.index_select(3, x1)
    return c0 + wx.view(1, 1, 1, -1) * (c1 - c0)


def _prepare(features: torch.Tensor, trans: torch.Tensor, glare: torch.Tensor):
    if trans.shape != glare.shape:
        raise ValidationError(f"map shapes differ: {tuple(trans.shape)} vs {tuple(glare.shape)}")
    h, w = features.shape[-2], features.shape[-1]
    trans = resize_field(trans, h, w)
    glare = resize_field(glare, h, w)
    return trans, glare


def impose_glare(features: torch.Tensor, trans: torch.Tensor, glare: torch.Tensor) -> torch.Tensor:
    """``features * trans + glare`` with maps resampled to the feature grid."""
    trans, glare = _prepare(features, trans, glare)
    return features * trans + glare


def compensate_glare(
    features: torch.Tensor, trans: torch.Tensor, glare: torch.Tensor
) -> torch.Tensor:
    """``(features - glare) / trans``; exact inverse of :func:`impose_glare`."""
    trans_min = float(trans.detach().min())
    if trans_min < EPSILON_T:
        raise ValidationError(f"transmission below floor {EPSILON_T}: min is {trans_min:.3g}")
    trans, glare = _prepare(features, trans, glare)
    return (features - glare) / trans


def maps_to_tensors(maps: GlareMaps, device=None, dtype=torch.float32):
    """A :class:`GlareMaps` as a pair of (1, 1, h, w) tensors."""
    zt = torch.as_tensor(maps.z_trans, dtype=dtype, device=device)[None, None]
    zg = torch.as_tensor(maps.z_glare, dtype=dtype, device=device)[None, None]
    return zt, zg


def tensors_to_maps(trans: torch.Tensor, glare: torch.Tensor) -> GlareMaps:
    """First-batch maps back to numpy form."""
    return GlareMaps(
        trans.detach().cpu().double().numpy()[0, 0],
        glare.detach().cpu().double().numpy()[0, 0],
    )


def modulate_with_maps(features: torch.Tensor, maps: GlareMaps) -> torch.Tensor:
    zt, zg = maps_to_tensors(maps, device=features.device, dtype=features.dtype)
    return impose_glare(features, zt, zg)


def compensate_with_maps(features: torch.Tensor, maps: GlareMaps) -> torch.Tensor:
    zt, zg = maps_to_tensors(maps, device=features.device, dtype=features.dtype)
    return compensate_glare(features, zt, zg)
