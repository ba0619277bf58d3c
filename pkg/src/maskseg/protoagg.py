"""Class-wise mask-induced feature aggregation toward EMA class prototypes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensorkit as tk
from .cwmim import ClassMaps
from .tensorkit import Tensor


@dataclass
class RegionSets:
    """Visible / masked available positions at feature resolution.

    ``labels`` is the class map; ``visible`` and ``available`` are bool maps of
    the same shape. Class ``c`` sets are read through :meth:`visible_set` and
    :meth:`masked_set`.
    """

    labels: np.ndarray
    visible: np.ndarray
    available: np.ndarray
    num_classes: int

    def visible_set(self, c: int) -> np.ndarray:
        return (self.labels == c) & self.visible & self.available

    def masked_set(self, c: int) -> np.ndarray:
        return (self.labels == c) & ~self.visible & self.available

    @property
    def masked_any(self) -> np.ndarray:
        return ~self.visible & self.available


def _to_grid(a: Optional[np.ndarray], shape) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.asarray(a)
    if a.shape[-2:] == shape[-2:]:
        return a
    return tk.resize_nearest_array(a, shape[-2], shape[-1], axes=(-2, -1))


def compute_region_sets(maps: ClassMaps, visible: np.ndarray, ignore_map: Optional[np.ndarray] = None,
                        pad_map: Optional[np.ndarray] = None) -> RegionSets:
    """Split each class's positions by the mask, dropping ignore-marked and padded ones.

    Full-resolution maps are nearest-resized to the feature grid first.
    """
    shape = maps.labels.shape
    vis = _to_grid(np.asarray(visible, dtype=bool), shape)
    avail = np.ones(shape, dtype=bool)
    for excl in (ignore_map, pad_map):
        e = _to_grid(excl, shape)
        if e is not None:
            avail &= ~e.astype(bool)
    return RegionSets(labels=maps.labels, visible=vis, available=avail, num_classes=maps.num_classes)


def compute_prototype(fea_c: np.ndarray, conf: np.ndarray, omega_v: np.ndarray) -> Optional[np.ndarray]:
    """Confidence-weighted mean of the feature vectors on ``omega_v``; ``None`` if empty."""
    fea_c = fea_c.data if isinstance(fea_c, Tensor) else np.asarray(fea_c)
    conf = np.asarray(conf)
    if conf.shape == fea_c.shape:  # channel-replicated form
        conf = conf[..., 0]
    sel = np.asarray(omega_v, dtype=bool)
    if not sel.any():
        return None
    w = conf[sel].astype(np.float64)
    vecs = fea_c[sel].astype(np.float64)
    return (w[:, None] * vecs).sum(axis=0) / w.sum()


@dataclass
class PrototypeMemory:
    num_classes: int
    dim: int
    alpha: float = 0.99
    dtype: type = np.float32
    vectors: np.ndarray = field(default=None)
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.zeros((self.num_classes, self.dim), dtype=self.dtype)
        if self.initialized is None:
            self.initialized = np.zeros(self.num_classes, dtype=bool)

    def copy(self) -> "PrototypeMemory":
        return PrototypeMemory(self.num_classes, self.dim, self.alpha, self.dtype,
                               self.vectors.copy(), self.initialized.copy())


def ema_update(memory: PrototypeMemory, c: int, v_c: np.ndarray) -> PrototypeMemory:
    """In place: ``v~_c <- alpha * v~_c + (1 - alpha) * v_c``."""
    v_c = np.asarray(v_c)
    if not np.all(np.isfinite(v_c)):
        raise ValueError(f"non-finite prototype for class {c}")
    a = memory.alpha
    memory.vectors[c] = (a * memory.vectors[c] + (1.0 - a) * v_c).astype(memory.dtype)
    memory.initialized[c] = True
    return memory


def update_memory(memory: PrototypeMemory, fea: np.ndarray, conf: np.ndarray, regions: RegionSets) -> List[int]:
    """Form every available class prototype from the visible part and fold it into memory."""
    updated = []
    for c in range(memory.num_classes):
        v = compute_prototype(fea, conf, regions.visible_set(c))
        if v is not None:
            ema_update(memory, c, v)
            updated.append(c)
    return updated


def batch_memory(memory_like: PrototypeMemory, fea: np.ndarray, conf: np.ndarray,
                 regions: RegionSets) -> PrototypeMemory:
    """Prototypes of the current batch alone (no moving average across batches)."""
    fresh = PrototypeMemory(memory_like.num_classes, memory_like.dim, 0.0, memory_like.dtype)
    update_memory(fresh, fea, conf, regions)
    return fresh


def cos_loss(z: Tensor, v: np.ndarray, tau: float = 10.0) -> Tensor:
    """``(1 - cos(z, v)) / tau`` with the prototype held constant."""
    z = tk.as_tensor(z)
    cos = tk.cosine_similarity(z, np.asarray(v))
    return tk.scalar_mul(tk.add(tk.neg(cos), 1.0), 1.0 / tau)


def aggregation_loss(fea_c: Tensor, conf: np.ndarray, v: np.ndarray, omega_m: np.ndarray,
                     tau: float = 10.0) -> Optional[Tensor]:
    """Confidence-weighted mean of ``cos_loss`` over ``omega_m``; ``None`` if nothing to aggregate."""
    conf = np.asarray(conf)
    if conf.shape == fea_c.shape:
        conf = conf[..., 0]
    norms = np.sqrt((fea_c.data.astype(np.float64) ** 2).sum(axis=-1))
    w = np.where(np.asarray(omega_m, dtype=bool) & (norms > 0), conf, 0.0)
    total = w.sum()
    if total <= 0:
        return None
    per_pos = cos_loss(fea_c, v, tau)
    return tk.sum(tk.mul_const(per_pos, w / total))


@dataclass
class FeatureStream:
    """One masked stream's trunk features and bookkeeping at feature resolution."""

    fea: Tensor
    regions: RegionSets
    conf: np.ndarray


def mim_feature_loss(streams: Sequence[FeatureStream], memory: PrototypeMemory, lambda_mf: float,
                     tau: float = 10.0, use_conf: bool = True) -> Tensor:
    """Gamma-gated class average of the aggregation loss over the combined streams.

    Classes with no available masked position, or with an uninitialized
    prototype, are left out of both the sum and the class count. On class
    ``c``'s support ``fea_c`` equals ``fea``, so cosines are taken on ``fea``.
    """
    ncls = memory.num_classes
    weights, totals = [], np.zeros(ncls)
    for s in streams:
        conf = np.asarray(s.conf) if use_conf else np.ones(s.regions.labels.shape)
        norms = np.sqrt((s.fea.data.astype(np.float64) ** 2).sum(axis=-1))
        w = np.where(s.regions.masked_any & (norms > 0), conf, 0.0)
        totals += np.bincount(s.regions.labels.reshape(-1), weights=w.reshape(-1), minlength=ncls)
        weights.append(w)
    active = (totals > 0) & memory.initialized
    n_active = int(active.sum())
    dtype = streams[0].fea.data.dtype if streams else np.float64
    if n_active == 0:
        return tk.Tensor(np.zeros((), dtype=dtype))

    scale = np.where(active, 1.0 / np.where(totals > 0, totals, 1.0), 0.0) / n_active
    loss = None
    for s, w in zip(streams, weights):
        coef = w * scale[s.regions.labels]
        if not coef.any():
            continue
        targets = memory.vectors[s.regions.labels]
        term = tk.sum(tk.mul_const(tk.cosine_similarity(s.fea, targets), coef))
        loss = term if loss is None else tk.add(loss, term)
    # sum(coef) over all streams equals 1, so the mean of (1 - cos) is 1 - sum(coef * cos)
    return tk.scalar_mul(tk.add(tk.neg(loss), 1.0), lambda_mf / tau)
