"""Toy encoder / semantic decoder / pixel decoder network.

Layout (channels-last, H and W divisible by 4)::

    encoder      conv3x3/s2 + relu -> conv3x3/s2 + relu          -> H/4 x W/4 x E
    semantic     conv3x3 + relu -> conv1x1 to C -> nearest x4     -> H x W x C
    pixel trunk  conv3x3 + relu                                   -> H/4 x W/4 x D'
    heads        C independent bias-free conv3x3, D' -> D, nearest x4

The 1x1 classifier runs before the nearest upsample; the two commute exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensorkit as tk
from .tensorkit import Tensor


@dataclass
class NetConfig:
    in_channels: int = 3
    num_classes: int = 4
    enc_channels: Tuple[int, int] = (16, 32)
    dec_channels: int = 32
    trunk_dim: int = 32
    head_kernel: int = 3
    use_bias: bool = True


@dataclass
class SegNetParams:
    """Named parameter tensors, split into the E/SeD group and the PiD group."""

    config: NetConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def get(self, name: str) -> Optional[Tensor]:
        return self.tensors.get(name)

    def names(self) -> List[str]:
        return list(self.tensors)

    def group(self, name: str) -> List[str]:
        """``"main"`` (encoder + semantic decoder) or ``"pid"`` (trunk + heads)."""
        if name == "main":
            return [n for n in self.tensors if n.startswith(("enc.", "sed."))]
        if name == "pid":
            return [n for n in self.tensors if n.startswith(("pid.", "head."))]
        raise KeyError(name)

    def head_names(self, c: int) -> List[str]:
        return [f"head.{c}.w"]

    def count(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()]))

    def astype(self, dtype) -> "SegNetParams":
        return SegNetParams(self.config, {
            n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for n, t in self.tensors.items()})

    def copy(self) -> "SegNetParams":
        return self.astype(next(iter(self.tensors.values())).data.dtype)


def _layer_specs(cfg: NetConfig):
    e1, e2 = cfg.enc_channels
    d, c, dp = cfg.in_channels, cfg.num_classes, cfg.trunk_dim
    specs = [
        ("enc.0", 3, d, e1, cfg.use_bias),
        ("enc.1", 3, e1, e2, cfg.use_bias),
        ("sed.0", 3, e2, cfg.dec_channels, cfg.use_bias),
        ("sed.out", 1, cfg.dec_channels, c, cfg.use_bias),
        ("pid.0", 3, e2, dp, cfg.use_bias),
    ]
    specs += [(f"head.{k}", cfg.head_kernel, dp, d, False) for k in range(c)]
    return specs


def param_count(cfg: NetConfig) -> int:
    """Closed-form parameter count: sum of k*k*Din*Dout (+ Dout with bias)."""
    return sum(k * k * din * dout + (dout if b else 0) for _, k, din, dout, b in _layer_specs(cfg))


def init_params(cfg: NetConfig, seed: int, dtype=np.float32) -> SegNetParams:
    """Fan-in scaled uniform (He) init; every layer draws from its own sub-stream."""
    if cfg.num_classes < 2:
        raise ValueError("need at least two classes")
    if cfg.trunk_dim < 4:
        raise ValueError("trunk_dim must be >= 4")
    if cfg.head_kernel % 2 == 0:
        raise ValueError("head kernel must be odd")
    tensors = {}
    for idx, (name, k, din, dout, has_bias) in enumerate(_layer_specs(cfg)):
        rng = np.random.default_rng([seed, idx])
        bound = np.sqrt(6.0 / (k * k * din))
        w = rng.uniform(-bound, bound, size=(k, k, din, dout))
        tensors[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True)
        if has_bias:
            tensors[f"{name}.b"] = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)
    return SegNetParams(cfg, tensors)


def _conv(params: SegNetParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return tk.conv2d(x, w, stride=stride, pad=w.shape[0] // 2, bias=params.get(f"{name}.b"))


def encode(params: SegNetParams, x, dropout_p: float = 0.0,
           rng: Optional[np.random.Generator] = None,
           keep: Optional[np.ndarray] = None):
    """Encoder features, optionally with channel dropout on the output.

    Returns ``(features, keep)``; ``keep`` is ``None`` when no perturbation was
    requested, otherwise the realized channel keep-mask for reuse.
    """
    x = tk.as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    if h % 4 or w % 4:
        raise ValueError(f"image extents must be divisible by 4, got {h}x{w}")
    f = tk.relu(_conv(params, "enc.0", x, stride=2))
    f = tk.relu(_conv(params, "enc.1", f, stride=2))
    if keep is None and (dropout_p == 0.0 or rng is None):
        if dropout_p > 0.0:
            raise ValueError("feature perturbation needs rng or keep")
        return f, None
    return tk.channel_dropout(f, dropout_p, rng=rng, keep=keep)


def semantic_decode(params: SegNetParams, enc: Tensor, out_hw: Optional[Tuple[int, int]] = None) -> Tensor:
    """Logits at input resolution (4x the encoder grid unless ``out_hw`` is given)."""
    g = tk.relu(_conv(params, "sed.0", enc))
    logits = _conv(params, "sed.out", g)
    h, w = out_hw if out_hw is not None else (4 * enc.shape[-3], 4 * enc.shape[-2])
    return tk.nearest_resize(logits, h, w)


def pixel_trunk(params: SegNetParams, enc: Tensor) -> Tensor:
    return tk.relu(_conv(params, "pid.0", enc))


def head_apply(params: SegNetParams, c: int, fea_c: Tensor, out_hw: Optional[Tuple[int, int]] = None,
               upsample: bool = True) -> Tensor:
    """Head_c (bias-free conv) on grouped features, then nearest upsample to image size.

    ``c`` is a 0-based class index.
    """
    if not 0 <= c < params.config.num_classes:
        raise ValueError(f"class index {c} outside [0, {params.config.num_classes})")
    w = params[f"head.{c}.w"]
    r = tk.conv2d(fea_c, w, stride=1, pad=w.shape[0] // 2)
    if not upsample:
        return r
    h, wd = out_hw if out_hw is not None else (4 * fea_c.shape[-3], 4 * fea_c.shape[-2])
    return tk.nearest_resize(r, h, wd)


@dataclass
class ForwardBundle:
    fea: Optional[Tensor]
    logits: Tensor
    probs: Tensor
    keep: Optional[np.ndarray] = None


def forward(params: SegNetParams, x, dropout_p: float = 0.0, rng=None, keep=None,
            with_trunk: bool = False) -> ForwardBundle:
    enc, keep = encode(params, x, dropout_p=dropout_p, rng=rng, keep=keep)
    logits = semantic_decode(params, enc)
    fea = pixel_trunk(params, enc) if with_trunk else None
    return ForwardBundle(fea=fea, logits=logits, probs=tk.softmax_channels(logits), keep=keep)
