"""Paired preprocessing and augmentation: Tile -> fixed-size model sample.

Geometry (flip, shift, scale, rotation) is sampled once and applied to both
epoch images and both targets; photometric jitter and noise are drawn
independently for each image and never touch the targets.  Targets are
always resampled with nearest neighbour so class labels and elevation
values are moved, never blended.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data_core import Tile, normalize_delta


@dataclass(frozen=True)
class AugSpec:
    target_size: int = 256
    p_hflip: float = 0.5
    shift: float = 16.0  # max |dx|, |dy| in output pixels
    scale: tuple = (0.9, 1.1)
    rotation: float = 10.0  # max |angle| in degrees
    noise_sigma: float = 0.01
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    sharpness: float = 0.5  # negative draws blur, positive sharpen
    flip_enabled: bool = True
    geometry_enabled: bool = True
    noise_enabled: bool = True
    radiometric_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.target_size < 1:
            raise ValueError("target_size must be positive")
        if not 0.0 <= self.p_hflip <= 1.0:
            raise ValueError("p_hflip must lie in [0, 1]")
        vals = (self.shift, *self.scale, self.rotation, self.noise_sigma, self.brightness, self.contrast,
                self.saturation, self.sharpness)
        if not np.all(np.isfinite(vals)):
            raise ValueError("augmentation ranges must be finite")
        if self.scale[0] > self.scale[1] or self.scale[0] <= 0:
            raise ValueError("scale range must be positive and ordered")
        if min(self.shift, self.rotation, self.noise_sigma, self.brightness, self.contrast, self.saturation,
               self.sharpness) < 0:
            raise ValueError("magnitudes must be non-negative")

    @classmethod
    def disabled(cls, target_size: int = 256, seed: int = 0) -> "AugSpec":
        return cls(target_size=target_size, flip_enabled=False, geometry_enabled=False, noise_enabled=False,
                   radiometric_enabled=False, seed=seed)


@dataclass(frozen=True)
class GeomTransform:
    flip: bool = False
    dx: int = 0
    dy: int = 0
    scale: float = 1.0
    angle: float = 0.0  # degrees

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.dx == 0 and self.dy == 0 and self.scale == 1.0 and self.angle == 0.0


@dataclass
class ModelSample:
    x1: np.ndarray  # (B, S, S) float64
    x2: np.ndarray
    y2d: np.ndarray  # (S, S) uint8
    y3d: np.ndarray  # (S, S) float64, normalised


# ---------------------------------------------------------------- resampling


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int)
    return np.minimum(idx, n_in - 1)


def _linear_index(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(r: np.ndarray, out_size, mode: str = "bilinear") -> np.ndarray:
    """Resize the last two axes to ``out_size`` (int or (h, w)).

    Bilinear uses half-pixel centres and the ``a + t (b - a)`` form, so a
    constant raster stays exactly constant.
    """
    oh, ow = (out_size, out_size) if np.isscalar(out_size) else out_size
    if oh < 1 or ow < 1:
        raise ValueError("output size must be positive")
    r = np.asarray(r)
    h, w = r.shape[-2:]
    if mode == "nearest":
        return r[..., _nearest_index(h, oh)[:, None], _nearest_index(w, ow)[None, :]]
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    x = r.astype(np.float64)
    i0, i1, t = _linear_index(h, oh)
    x = x[..., i0, :] + t[:, None] * (x[..., i1, :] - x[..., i0, :])
    j0, j1, u = _linear_index(w, ow)
    return x[..., j0] + u * (x[..., j1] - x[..., j0])


def _source_coords(g: GeomTransform, n: int):
    """Inverse map: output pixel grid -> source coordinates (row, col)."""
    c = (n - 1) / 2.0
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    if g.flip:
        cols = (n - 1) - cols
    yr, xr = rows - g.dy - c, cols - g.dx - c
    th = np.deg2rad(g.angle)
    cos, sin = np.cos(th), np.sin(th)
    ys = (cos * yr - sin * xr) / g.scale + c
    xs = (sin * yr + cos * xr) / g.scale + c
    return ys, xs


def warp(r: np.ndarray, g: GeomTransform, mode: str, fill) -> np.ndarray:
    """Apply ``g`` to the last two axes of a square raster stack.

    ``fill`` is a scalar or one value per leading-axis plane.
    """
    if g.is_identity:
        return np.array(r, copy=True)
    n = r.shape[-1]
    if g.scale == 1.0 and g.angle == 0.0:
        # pure flip/shift: exact integer relocation
        out = r[..., :, ::-1] if g.flip else r
        res = np.empty_like(r)
        res[...] = np.reshape(fill, (-1, 1, 1)) if np.ndim(fill) else fill
        dy, dx = int(g.dy), int(g.dx)
        ys, yd = slice(max(-dy, 0), n - max(dy, 0)), slice(max(dy, 0), n - max(-dy, 0))
        xs, xd = slice(max(-dx, 0), n - max(dx, 0)), slice(max(dx, 0), n - max(-dx, 0))
        res[..., yd, xd] = out[..., ys, xs]
        return res
    ys, xs = _source_coords(g, n)
    planes = r.reshape(-1, n, n)
    fills = np.broadcast_to(np.asarray(fill, dtype=np.float64), (planes.shape[0],))
    order = 0 if mode == "nearest" else 1
    out = np.empty(planes.shape, dtype=np.float64)
    for k, p in enumerate(planes):
        if order == 0:
            yi, xi = np.floor(ys + 0.5).astype(int), np.floor(xs + 0.5).astype(int)
            ok = (yi >= 0) & (yi < n) & (xi >= 0) & (xi < n)
            o = np.full((n, n), fills[k])
            o[ok] = p[yi[ok], xi[ok]]
            out[k] = o
        else:
            out[k] = ndimage.map_coordinates(p.astype(np.float64), [ys, xs], order=1, mode="constant", cval=fills[k])
    return out.reshape(r.shape).astype(r.dtype)


# ---------------------------------------------------------------- sampling


def sample_transform(spec: AugSpec, rng: np.random.Generator) -> GeomTransform:
    """Draw one geometric transform.  The draw sequence is fixed (flip,
    shift, scale, angle) regardless of which transforms are enabled, so
    toggling one does not perturb the others."""
    flip = bool(rng.random() < spec.p_hflip)
    dx = int(np.rint(rng.uniform(-spec.shift, spec.shift)))
    dy = int(np.rint(rng.uniform(-spec.shift, spec.shift)))
    scale = float(rng.uniform(*spec.scale)) if spec.scale[1] > spec.scale[0] else float(spec.scale[0])
    angle = float(rng.uniform(-spec.rotation, spec.rotation))
    if not spec.flip_enabled:
        flip = False
    if not spec.geometry_enabled:
        dx = dy = 0
        scale, angle = 1.0, 0.0
    return GeomTransform(flip, dx, dy, scale, angle)


def _radiometric(img: np.ndarray, spec: AugSpec, rng) -> np.ndarray:
    out = img
    b = rng.uniform(-spec.brightness, spec.brightness)
    c = 1.0 + rng.uniform(-spec.contrast, spec.contrast)
    s = 1.0 + rng.uniform(-spec.saturation, spec.saturation)
    k = rng.uniform(-spec.sharpness, spec.sharpness)
    if spec.radiometric_enabled:
        out = out + b
        mu = out.mean(axis=(1, 2), keepdims=True)
        out = mu + c * (out - mu)
        gray = out.mean(axis=0, keepdims=True)
        out = gray + s * (out - gray)
        blur = ndimage.uniform_filter(out, size=(1, 3, 3), mode="nearest")
        out = out + k * (out - blur)
    noise = rng.standard_normal(img.shape)
    if spec.noise_enabled and spec.noise_sigma > 0:
        out = out + spec.noise_sigma * noise
    return np.clip(out, 0.0, 1.0) if out is not img else out


def tile_rng(seed: int, tile_id: str, epoch: int) -> np.random.Generator:
    """Counter-based stream: depends only on (seed, tile, epoch)."""
    return np.random.default_rng([seed, epoch, zlib.crc32(tile_id.encode())])


def _resized(t: Tile, size: int, h_scale: float):
    x1 = resize(t.img1, size, "bilinear")
    x2 = resize(t.img2, size, "bilinear")
    y2d = resize(t.mask2d, size, "nearest").astype(np.uint8)
    y3d = np.asarray(normalize_delta(resize(t.delta3d, size, "nearest"), h_scale), dtype=np.float64)
    return x1, x2, y2d, y3d


def plain_sample(t: Tile, size: int, h_scale: float) -> ModelSample:
    """Resize only: the evaluation-time pipeline."""
    return ModelSample(*_resized(t, size, h_scale))


def apply_paired(t: Tile, g: GeomTransform, spec: AugSpec, rng: np.random.Generator, h_scale: float) -> ModelSample:
    x1, x2, y2d, y3d = _resized(t, spec.target_size, h_scale)
    x1 = warp(x1, g, "bilinear", x1.mean(axis=(1, 2)))
    x2 = warp(x2, g, "bilinear", x2.mean(axis=(1, 2)))
    y2d = warp(y2d, g, "nearest", 0).astype(np.uint8)
    y3d = warp(y3d, g, "nearest", 0.0)
    x1 = _radiometric(x1, spec, rng)
    x2 = _radiometric(x2, spec, rng)
    return ModelSample(x1, x2, y2d, y3d)


def make_sample(t: Tile, spec: AugSpec, h_scale: float, epoch: int = 0, train: bool = True) -> ModelSample:
    """Training samples get the full augmentation; others a plain resize."""
    if not train:
        return plain_sample(t, spec.target_size, h_scale)
    rng = tile_rng(spec.seed, t.meta.tile_id, epoch)
    g = sample_transform(spec, rng)
    return apply_paired(t, g, spec, rng, h_scale)
