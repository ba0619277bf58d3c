"""Random patch masks and the weak / strong input perturbations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensorkit as tk
from .tensorkit import IGNORE_INDEX, Tensor


@dataclass(frozen=True)
class MaskSpec:
    patch_size: int = 6
    ratio: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError(f"patch size must be >= 1, got {self.patch_size}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"masking ratio must be in [0, 1), got {self.ratio}")


@dataclass
class Mask:
    visible: np.ndarray  # H x W bool, True = kept
    grid: Tuple[int, int]
    masked_cells: int

    @property
    def cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def fraction(self) -> float:
        return self.masked_cells / self.cells

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.visible.astype(dtype)


def masked_cell_count(n_cells: int, ratio: float) -> int:
    # round-half-even, matching Python's round()
    return int(round(ratio * n_cells))


def sample_mask(h: int, w: int, spec: MaskSpec, rng: Optional[np.random.Generator] = None) -> Mask:
    """Mask exactly ``round(ratio * cells)`` patches of a ``ceil(H/p) x ceil(W/p)`` grid."""
    p = spec.patch_size
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} smaller than patch size {p}")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    gh, gw = -(-h // p), -(-w // p)
    n = gh * gw
    k = masked_cell_count(n, spec.ratio)
    cell_visible = np.ones(n, dtype=bool)
    cell_visible[rng.choice(n, size=k, replace=False)] = False
    grid = cell_visible.reshape(gh, gw)
    visible = np.repeat(np.repeat(grid, p, axis=0), p, axis=1)[:h, :w]
    return Mask(visible=visible, grid=(gh, gw), masked_cells=k)


def sample_masks(n: int, h: int, w: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent masks stacked as an ``N x H x W`` bool array."""
    return np.stack([sample_mask(h, w, spec, rng).visible for _ in range(n)])


def apply_mask(x, m):
    """Zero masked pixels across all channels. ``m`` is a Mask or a (N x) H x W array."""
    vis = m.visible if isinstance(m, Mask) else np.asarray(m)
    if vis.shape != tuple(x.shape[:-1]):
        raise ValueError(f"mask {vis.shape} does not match image {tuple(x.shape)}")
    vis = vis[..., None]
    if isinstance(x, Tensor):
        return tk.mul_const(x, vis)
    return x * vis.astype(np.asarray(x).dtype)


# --------------------------------------------------------------------------
# perturbations

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_pad: int = 8
    brightness: float = 0.25
    contrast: float = 0.25
    noise_std: float = 0.04
    shuffle_prob: float = 0.2


@dataclass(frozen=True)
class Geometry:
    flip: bool
    dy: int
    dx: int

    def padded_fraction(self, h: int, w: int) -> float:
        return 1.0 - (h - abs(self.dy)) * (w - abs(self.dx)) / (h * w)


def sample_geometry(rng: np.random.Generator, cfg: AugmentConfig) -> Geometry:
    flip = bool(rng.random() < cfg.flip_prob)
    dy, dx = rng.integers(-cfg.crop_pad, cfg.crop_pad + 1, size=2) if cfg.crop_pad else (0, 0)
    return Geometry(flip, int(dy), int(dx))


def _shift(a: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    """``out[i, j] = a[i + dy, j + dx]``, ``fill`` where the source is outside."""
    h, w = a.shape[:2]
    out = np.full_like(a, fill)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = a[ys, xs]
    return out


def apply_geometry(x: np.ndarray, label: Optional[np.ndarray], geo: Geometry):
    """Flip then pad-and-crop. Returns ``(image, label, pad_map)``.

    Padded image pixels are 0, padded label pixels the ignore marker.
    """
    h, w = x.shape[:2]
    if geo.flip:
        x = x[:, ::-1]
        label = label[:, ::-1] if label is not None else None
    xo = _shift(np.ascontiguousarray(x), geo.dy, geo.dx, 0)
    pad = _shift(np.zeros((h, w), dtype=bool), geo.dy, geo.dx, True)
    lo = _shift(np.ascontiguousarray(label), geo.dy, geo.dx, IGNORE_INDEX) if label is not None else None
    return xo, lo, pad


def weak_perturb(x: np.ndarray, label: Optional[np.ndarray], rng: np.random.Generator,
                 cfg: AugmentConfig = AugmentConfig(), geometry: Optional[Geometry] = None):
    """Random horizontal flip plus crop-with-pad back to H x W.

    Returns ``(x_w, label_w, pad_map, geometry)``; the label undergoes the same
    geometric transform.
    """
    geo = geometry if geometry is not None else sample_geometry(rng, cfg)
    xo, lo, pad = apply_geometry(x, label, geo)
    return xo, lo, pad, geo


def strong_perturb(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Photometric jitter only: brightness, contrast, noise, channel shuffle, clamp to [0, 1]."""
    out = np.asarray(x, dtype=np.float64)
    b = rng.uniform(-cfg.brightness, cfg.brightness) if cfg.brightness else 0.0
    c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast) if cfg.contrast else 1.0
    if c != 1.0:
        m = out.mean()
        out = (out - m) * c + m
    out = out + b
    if cfg.noise_std:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape)
    if cfg.shuffle_prob and rng.random() < cfg.shuffle_prob:
        out = out[..., rng.permutation(out.shape[-1])]
    return np.clip(out, 0.0, 1.0).astype(np.asarray(x).dtype)
