"""Physical forward model of compound optical degradation and its inverse.

A clean image is first blurred patch-wise by field-dependent point spread
functions, then passed through a scattering stage

    degraded = blurred * z_trans + z_glare

where ``z_trans`` is a multiplicative contrast-attenuation field and
``z_glare`` an additive stray-light field. Given known maps the scattering
stage inverts exactly: ``(degraded - z_glare) / z_trans``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ValidationError
from .storage import read_container, write_container

# Transmission never reaches zero in a physical system; this floor keeps the
# inverse modulation bounded.
EPSILON_T = 1e-3


def resize_bilinear(field: np.ndarray, out_shape) -> np.ndarray:
    """Bilinear resize of a 2-D field with pixel-center alignment.

    Uses the lerp form ``v0 + w * (v1 - v0)`` so that constant fields resize
    to exactly the same constant and same-size calls are exact identities;
    the identity maps (1, 0) must survive resampling bit-for-bit.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 2:
        raise ValidationError(f"expected 2-D field, got shape {field.shape}")
    h, w = field.shape
    out_h, out_w = int(out_shape[0]), int(out_shape[1])

    def axis_coords(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        i0f = np.floor(pos)
        frac = pos - i0f
        i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
        i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
        frac[i0 == i1] = 0.0
        return i0, i1, frac

    y0, y1, wy = axis_coords(h, out_h)
    x0, x1, wx = axis_coords(w, out_w)
    rows = field[y0, :] + wy[:, None] * (field[y1, :] - field[y0, :])
    return rows[:, x0] + wx[None, :] * (rows[:, x1] - rows[:, x0])


def validate_image(image: np.ndarray, min_side: int = 16) -> np.ndarray:
    """Check the H, W, C image contract used at pipeline boundaries."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValidationError(f"expected H,W,{{1,3}} image, got shape {img.shape}")
    if img.shape[0] < min_side or img.shape[1] < min_side:
        raise ValidationError(f"image sides must be >= {min_side}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValidationError("image contains non-finite values")
    return img


@dataclass(frozen=True)
class GlareMaps:
    """Latent scattering maps: transmission in [eps_T, 1], glare in [0, 1-eps_T].

    Stored at their own resolution, which may be coarser than the image they
    are applied to; application resamples bilinearly.
    """

    z_trans: np.ndarray
    z_glare: np.ndarray

    def __post_init__(self):
        zt = np.asarray(self.z_trans, dtype=np.float64)
        zg = np.asarray(self.z_glare, dtype=np.float64)
        object.__setattr__(self, "z_trans", zt)
        object.__setattr__(self, "z_glare", zg)
        if zt.ndim != 2 or zg.ndim != 2 or zt.shape != zg.shape:
            raise ValidationError(
                f"maps must be 2-D with equal shapes, got {zt.shape} and {zg.shape}"
            )
        if not (np.all(np.isfinite(zt)) and np.all(np.isfinite(zg))):
            raise ValidationError("maps contain non-finite values")
        if zt.min() < EPSILON_T:
            raise ValidationError(
                f"z_trans must be >= {EPSILON_T} everywhere, min is {zt.min():.3g}"
            )

    @property
    def resolution(self):
        return self.z_trans.shape

    @staticmethod
    def identity(resolution) -> "GlareMaps":
        shape = (int(resolution[0]), int(resolution[1]))
        return GlareMaps(np.ones(shape), np.zeros(shape))

    def at_resolution(self, out_shape) -> "GlareMaps":
        if tuple(self.resolution) == (int(out_shape[0]), int(out_shape[1])):
            return self
        return GlareMaps(
            resize_bilinear(self.z_trans, out_shape),
            resize_bilinear(self.z_glare, out_shape),
        )

    def save(self, path, header: dict | None = None) -> None:
        meta = {"kind": "glare_maps", "resolution": list(self.resolution)}
        meta.update(header or {})
        write_container(path, meta, {"z_trans": self.z_trans, "z_glare": self.z_glare})

    @staticmethod
    def load(path) -> "GlareMaps":
        _, arrays = read_container(path)
        return GlareMaps(arrays["z_trans"], arrays["z_glare"])


@dataclass(frozen=True)
class PSFBank:
    """Grid of normalized convolution kernels, one per patch cell."""

    kernels: np.ndarray  # (rows, cols, K, K)

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        object.__setattr__(self, "kernels", k)
        if k.ndim != 4 or k.shape[2] != k.shape[3]:
            raise ValidationError(f"kernels must be (rows, cols, K, K), got {k.shape}")
        if k.shape[2] % 2 != 1:
            raise ValidationError(f"kernel size must be odd, got {k.shape[2]}")
        if k.min() < 0:
            raise ValidationError("kernels must be non-negative")
        sums = k.sum(axis=(2, 3))
        if np.any(np.abs(sums - 1.0) > 1e-6):
            worst = float(np.abs(sums - 1.0).max())
            raise ValidationError(f"kernels must sum to 1 +/- 1e-6 (worst deviation {worst:.3g})")

    @property
    def grid_rows(self) -> int:
        return self.kernels.shape[0]

    @property
    def grid_cols(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    def save(self, path, header: dict | None = None) -> None:
        meta = {
            "kind": "psf_bank",
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "kernel_size": self.kernel_size,
        }
        meta.update(header or {})
        write_container(path, meta, {"kernels": self.kernels})

    @staticmethod
    def load(path) -> "PSFBank":
        _, arrays = read_container(path)
        return PSFBank(arrays["kernels"])


def _axis_blend(n_pixels: int, n_cells: int) -> np.ndarray:
    """Per-cell blend weights along one axis, (n_cells, n_pixels).

    Linear interpolation between cell centers, clamped at the borders; the
    weights at every pixel sum to exactly 1.
    """
    cell = n_pixels // n_cells
    weights = np.zeros((n_cells, n_pixels), dtype=np.float64)
    pos = (np.arange(n_pixels, dtype=np.float64) + 0.5) / cell - 0.5
    i0 = np.clip(np.floor(pos), 0, max(n_cells - 2, 0)).astype(np.int64)
    frac = np.clip(pos - i0, 0.0, 1.0)
    if n_cells == 1:
        weights[0, :] = 1.0
        return weights
    cols = np.arange(n_pixels)
    weights[i0, cols] = 1.0 - frac
    weights[i0 + 1, cols] += frac
    return weights


@dataclass(frozen=True)
class PatchGrid:
    """Patch tiling of an image with bilinear partition-of-unity blending.

    Each cell owns an ``(H/rows, W/cols)`` region; its kernel's influence
    ramps linearly to zero at the neighboring cell centers, so effective
    patches overlap their neighbors by half a patch side.
    """

    height: int
    width: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError("grid must have at least one cell per axis")
        if self.height % self.rows or self.width % self.cols:
            raise ConfigurationError(
                f"grid {self.rows}x{self.cols} does not tile image "
                f"{self.height}x{self.width} exactly"
            )

    @property
    def patch_height(self) -> int:
        return self.height // self.rows

    @property
    def patch_width(self) -> int:
        return self.width // self.cols

    @property
    def overlap(self) -> int:
        # half of the effective (doubled) patch side
        return min(self.patch_height, self.patch_width)

    def blend_weights(self):
        """(row_weights, col_weights) with shapes (rows, H) and (cols, W)."""
        return _axis_blend(self.height, self.rows), _axis_blend(self.width, self.cols)


def apply_psf_patchwise(image: np.ndarray, bank: PSFBank, grid: PatchGrid) -> np.ndarray:
    """Spatially-varying blur: blend per-cell convolutions with the grid ramps.

    Equivalent to convolving every pixel with its bilinearly blended kernel.
    Boundaries use reflection padding, which preserves constants.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if (h, w) != (grid.height, grid.width):
        raise ConfigurationError(
            f"grid was built for {grid.height}x{grid.width}, image is {h}x{w}"
        )
    if (bank.grid_rows, bank.grid_cols) != (grid.rows, grid.cols):
        raise ConfigurationError(
            f"bank grid {bank.grid_rows}x{bank.grid_cols} does not match "
            f"patch grid {grid.rows}x{grid.cols}"
        )
    if bank.kernel_size > 2 * min(grid.patch_height, grid.patch_width):
        raise ConfigurationError(
            f"kernel size {bank.kernel_size} exceeds the patch side "
            f"{2 * min(grid.patch_height, grid.patch_width)}"
        )

    row_w, col_w = grid.blend_weights()
    out = np.zeros_like(img)
    for i in range(grid.rows):
        rows_on = np.nonzero(row_w[i] > 0)[0]
        y0, y1 = rows_on[0], rows_on[-1] + 1
        for j in range(grid.cols):
            cols_on = np.nonzero(col_w[j] > 0)[0]
            x0, x1 = cols_on[0], cols_on[-1] + 1
            kernel = bank.kernels[i, j]
            r = bank.kernel_size // 2
            # convolve an r-padded slab so slab edges see true image content
            sy0, sy1 = max(y0 - r, 0), min(y1 + r, h)
            sx0, sx1 = max(x0 - r, 0), min(x1 + r, w)
            weight = row_w[i, y0:y1, None] * col_w[j, None, x0:x1]
            for ch in range(c):
                conv = ndimage.convolve(img[sy0:sy1, sx0:sx1, ch], kernel, mode="mirror")
                out[y0:y1, x0:x1, ch] += weight * conv[y0 - sy0 : y1 - sy0, x0 - sx0 : x1 - sx0]
    return out


def apply_scattering(image: np.ndarray, maps: GlareMaps) -> np.ndarray:
    """``image * z_trans + z_glare`` with maps broadcast across channels."""
    img = np.asarray(image, dtype=np.float64)
    spatial = img.shape[:2] if img.ndim >= 2 else img.shape
    if img.ndim >= 2:
        local = maps.at_resolution(spatial)
        zt, zg = local.z_trans, local.z_glare
        if img.ndim == 3:
            zt, zg = zt[:, :, None], zg[:, :, None]
    else:
        zt, zg = maps.z_trans, maps.z_glare
    return img * zt + zg


def invert_scattering(image: np.ndarray, maps: GlareMaps) -> np.ndarray:
    """Exact inverse of :func:`apply_scattering` on unclamped values."""
    if maps.z_trans.min() < EPSILON_T:
        raise ValidationError("degenerate transmission: z_trans below floor")
    img = np.asarray(image, dtype=np.float64)
    spatial = img.shape[:2] if img.ndim >= 2 else img.shape
    if img.ndim >= 2:
        local = maps.at_resolution(spatial)
        zt, zg = local.z_trans, local.z_glare
        if img.ndim == 3:
            zt, zg = zt[:, :, None], zg[:, :, None]
    else:
        zt, zg = maps.z_trans, maps.z_glare
    return (img - zg) / zt


def compose_degradation(
    clean: np.ndarray, bank: PSFBank, grid: PatchGrid, maps: GlareMaps
) -> np.ndarray:
    """Full forward model: patch-wise blur followed by scattering."""
    return apply_scattering(apply_psf_patchwise(clean, bank, grid), maps)


def _delta_kernel(size: int) -> np.ndarray:
    k = np.zeros((size, size), dtype=np.float64)
    k[size // 2, size // 2] = 1.0
    return k


def _anisotropic_gaussian(size: int, sigma_major: float, sigma_minor: float, theta: float):
    r = size // 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * x + st * y
    v = -st * x + ct * y
    k = np.exp(-0.5 * ((u / sigma_major) ** 2 + (v / sigma_minor) ** 2))
    return k / k.sum()


def synthesize_psf_bank(
    seed: int, grid_shape, kernel_size: int, severity: float
) -> PSFBank:
    """Field-dependent anisotropic Gaussian kernels for a synthetic optic.

    Blur grows from the grid center outward and elongates tangentially, the
    way off-axis aberrations behave. ``severity`` 0 gives delta kernels.
    """
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ValidationError(f"kernel_size must be odd and >= 3, got {kernel_size}")
    if not 0.0 <= severity <= 1.0:
        raise ValidationError(f"severity must be in [0, 1], got {severity}")
    rows, cols = int(grid_shape[0]), int(grid_shape[1])
    rng = np.random.default_rng(seed)
    jitter = rng.normal(0.0, 1.0, size=(rows, cols, 2))

    if severity == 0.0:
        k = np.broadcast_to(_delta_kernel(kernel_size), (rows, cols, kernel_size, kernel_size))
        return PSFBank(k.copy())

    cy, cx = (rows - 1) / 2.0, (cols - 1) / 2.0
    max_r = max(np.hypot(cy, cx), 1e-9)
    kernels = np.empty((rows, cols, kernel_size, kernel_size), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            rho = np.hypot(i - cy, j - cx) / max_r
            azimuth = np.arctan2(i - cy, j - cx)
            sigma_major = 0.35 + severity * (0.45 + 2.4 * rho) * (1.0 + 0.08 * jitter[i, j, 0])
            sigma_minor = 0.35 + severity * (0.30 + 0.7 * rho)
            theta = azimuth + np.pi / 2 + 0.12 * jitter[i, j, 1]
            kernels[i, j] = _anisotropic_gaussian(
                kernel_size, max(sigma_major, 0.2), max(sigma_minor, 0.2), theta
            )
    return PSFBank(kernels)


def _normalized(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.full_like(field, 0.5)
    return (field - lo) / (hi - lo)


def _random_poly(rng, xx, yy):
    c = rng.normal(0.0, 0.5, size=6)
    return c[0] + c[1] * xx + c[2] * yy + c[3] * xx**2 + c[4] * xx * yy + c[5] * yy**2


def synthesize_glare_fields(seed: int, resolution, strength: float) -> GlareMaps:
    """Smooth low-frequency transmission/glare fields for an oracle capture.

    ``z_trans = 1 - strength * s`` and ``z_glare = strength * g`` where ``s``
    and ``g`` are normalized blends of a radial ramp toward an off-axis light
    direction and a seeded low-order polynomial. ``g`` is bounded by ``s``
    (stray light cannot exceed the light removed from the direct path), which
    keeps composed values of in-range images inside [0, 1].
    """
    if not 0.0 <= strength <= 1.0:
        raise ValidationError(f"strength must be in [0, 1], got {strength}")
    h, w = int(resolution[0]), int(resolution[1])
    rng = np.random.default_rng(seed)

    if strength == 0.0:
        return GlareMaps.identity((h, w))

    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    angle = rng.uniform(0.0, 2.0 * np.pi)
    radius = rng.uniform(1.0, 1.5)
    py, px = radius * np.sin(angle), radius * np.cos(angle)
    dist = np.hypot(yy - py, xx - px)
    ramp = 1.0 - _normalized(dist)

    s = _normalized(0.65 * ramp + 0.35 * _normalized(_random_poly(rng, xx, yy)))
    glare_fraction = 0.30 + 0.40 * _normalized(_random_poly(rng, xx, yy))
    g = s * glare_fraction

    z_trans = np.maximum(1.0 - strength * s, EPSILON_T)
    z_glare = np.clip(strength * g, 0.0, 1.0 - EPSILON_T)
    return GlareMaps(z_trans, z_glare)
