"""Least-squares affine alignment from point correspondences, plus warping."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class Correspondences:
    """N source->target point pairs in pixel coordinates."""

    src: np.ndarray  # (N, 2)
    dst: np.ndarray  # (N, 2)

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.float64)
        dst = np.asarray(self.dst, dtype=np.float64)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        if src.ndim != 2 or src.shape[1] != 2 or src.shape != dst.shape:
            raise ValidationError(f"expected matching (N, 2) arrays, got {src.shape}, {dst.shape}")
        if src.shape[0] < 3:
            raise ValidationError(f"need at least 3 correspondences, got {src.shape[0]}")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
            raise ValidationError("correspondences contain non-finite values")
        centered = src - src.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            raise ValidationError("source points are collinear (degenerate geometry)")


@dataclass(frozen=True)
class AffineTransform:
    m11: float
    m12: float
    m21: float
    m22: float
    t_x: float
    t_y: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.m11, self.m12, self.t_x],
                [self.m21, self.m22, self.t_y],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def linear(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m21, self.m22]])

    def inverse(self) -> "AffineTransform":
        det = self.m11 * self.m22 - self.m12 * self.m21
        if abs(det) <= 1e-12:
            raise ValidationError(f"transform is singular (|det| = {abs(det):.3g})")
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv[0, 0], inv[0, 1], inv[1, 0], inv[1, 1], inv[0, 2], inv[1, 2])

    def params(self):
        return [self.m11, self.m12, self.m21, self.m22, self.t_x, self.t_y]

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.params(), f)

    @staticmethod
    def load_json(path) -> "AffineTransform":
        with open(path) as f:
            values = json.load(f)
        if len(values) != 6:
            raise ValidationError(f"expected six numbers, got {len(values)}")
        return AffineTransform(*[float(v) for v in values])

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


def fit_affine(c: Correspondences) -> AffineTransform:
    """Closed-form least squares over the six affine parameters.

    Points are centered before the normal-equations solve (conditioning),
    then the translation is recovered for the uncentered frame; this is
    algebraically the same global minimizer of the squared residuals.
    """
    src_mean = c.src.mean(axis=0)
    dst_mean = c.dst.mean(axis=0)
    x = c.src - src_mean
    y = c.dst - dst_mean
    gram = x.T @ x
    if np.linalg.matrix_rank(gram, tol=1e-9 * max(float(np.trace(gram)), 1.0)) < 2:
        raise ValidationError("source points are collinear (degenerate geometry)")
    linear = np.linalg.solve(gram, x.T @ y).T  # (2, 2)
    t = dst_mean - linear @ src_mean
    return AffineTransform(
        linear[0, 0], linear[0, 1], linear[1, 0], linear[1, 1], float(t[0]), float(t[1])
    )


def apply_affine(a: AffineTransform, point):
    """Map a point (or an (N, 2) array of points) through the transform."""
    pts = np.asarray(point, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = pts @ a.linear.T + np.array([a.t_x, a.t_y])
    return out[0] if single else out


def fit_residual(a: AffineTransform, c: Correspondences) -> float:
    """Sum of squared reprojection errors of the fit."""
    diff = apply_affine(a, c.src) - c.dst
    return float(np.sum(diff**2))


def warp_image(img: np.ndarray, a: AffineTransform) -> np.ndarray:
    """Forward-warp via inverse-map bilinear resampling; outside fills 0."""
    inv = a.inverse()  # raises on singular linear part
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = apply_affine(inv, np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx = src[:, 0].reshape(h, w)
    sy = src[:, 1].reshape(h, w)

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0c = np.clip(x0, 0, w - 1).astype(np.int64)
    y0c = np.clip(y0, 0, h - 1).astype(np.int64)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.int64)

    out = np.zeros_like(img)
    for ch in range(c):
        plane = img[:, :, ch]
        top = plane[y0c, x0c] + fx * (plane[y0c, x1c] - plane[y0c, x0c])
        bot = plane[y1c, x0c] + fx * (plane[y1c, x1c] - plane[y1c, x0c])
        out[:, :, ch] = np.where(valid, top + fy * (bot - top), 0.0)
    return out[:, :, 0] if squeeze else out


def load_correspondences_csv(path) -> Correspondences:
    """Read ``x,y,x',y'`` rows; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValidationError(f"{path}:{line_no}: expected 4 comma-separated values")
            rows.append([float(p) for p in parts])
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError(f"{path}: no correspondences found")
    return Correspondences(arr[:, 0:2], arr[:, 2:4])
