"""Class-wise masked image modeling in pixel space."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import nets
from . import tensorkit as tk
from .tensorkit import Tensor


@dataclass
class ClassMaps:
    """Pseudo-label class index map at feature resolution, ``(N x) H' x W'``.

    Each class plane is replicated across feature channels when applied.
    """

    labels: np.ndarray
    num_classes: int

    def plane(self, c: int) -> np.ndarray:
        return (self.labels == c)[..., None]

    def replicated(self, c: int, depth: int) -> np.ndarray:
        return np.repeat(self.plane(c), depth, axis=-1)


def build_class_maps(y_pse: np.ndarray, h: int, w: int, num_classes: int) -> ClassMaps:
    """Nearest-resize a full-resolution pseudo-label to ``h x w``."""
    y = np.asarray(y_pse)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError("pseudo-labels must be class indices in [0, C)")
    small = tk.resize_nearest_array(y, h, w, axes=(-2, -1))
    return ClassMaps(labels=small, num_classes=num_classes)


def group_features(fea: Tensor, maps: ClassMaps) -> List[Tensor]:
    """``fea_c = fea * Y_c`` for every class; the groups partition ``fea``."""
    if tuple(fea.shape[:-1]) != maps.labels.shape:
        raise ValueError(f"features {fea.shape} do not match class maps {maps.labels.shape}")
    return [tk.mul_const(fea, maps.plane(c)) for c in range(maps.num_classes)]


def reconstruct(params: nets.SegNetParams, grouped: List[Tensor],
                out_hw: Optional[Tuple[int, int]] = None) -> Tensor:
    """``r = sum_c Head_c(fea_c)``, accumulated in ascending class order."""
    r = None
    for c, fea_c in enumerate(grouped):
        rc = nets.head_apply(params, c, fea_c, upsample=False)
        r = rc if r is None else tk.add(r, rc)
    h, w = out_hw if out_hw is not None else (4 * r.shape[-3], 4 * r.shape[-2])
    return tk.nearest_resize(r, h, w)


def reconstruct_plain(params: nets.SegNetParams, fea: Tensor,
                      out_hw: Optional[Tuple[int, int]] = None) -> Tensor:
    """Ungrouped reconstruction through the same head set (basic MIM comparison)."""
    return reconstruct(params, [fea] * params.config.num_classes, out_hw)


def build_fp_target(params: nets.SegNetParams, x_w, keep: np.ndarray, dropout_p: float,
                    y_w_pse: np.ndarray, classwise: bool = True) -> Tensor:
    """Detached reconstruction of the unmasked weak image under the shared dropout realization."""
    with tk.no_grad():
        enc, _ = nets.encode(params, x_w, dropout_p=dropout_p, keep=keep)
        fea = nets.pixel_trunk(params, enc)
        if classwise:
            maps = build_class_maps(y_w_pse, fea.shape[-3], fea.shape[-2], params.config.num_classes)
            r = reconstruct(params, group_features(fea, maps), x_w.shape[-3:-1])
        else:
            r = reconstruct_plain(params, fea, x_w.shape[-3:-1])
    return tk.detach(r)


def mim_pixel_loss(r_l: Tensor, x_l, r_s: Tensor, x_s, r_fp: Tensor, x_fp, lambda_mp: float) -> Tensor:
    """``lambda_mp * [mse(r_l, x_l) + mse(r_s, x_s) + mse(r_fp, x_fp)]``, batch-averaged."""
    total = tk.add(tk.add(tk.mse(r_l, x_l), tk.mse(r_s, x_s)), tk.mse(r_fp, x_fp))
    return tk.scalar_mul(total, lambda_mp)
