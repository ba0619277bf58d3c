"""Semi-supervised baseline: supervised CE plus confidence-gated pseudo-label CE."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensorkit as tk
from .tensorkit import IGNORE_INDEX, Tensor


@dataclass
class PseudoLabel:
    label: np.ndarray       # (N x) H x W class indices
    confidence: np.ndarray  # max class probability
    gate: np.ndarray        # confidence >= threshold (and not excluded)

    def gated_target(self) -> np.ndarray:
        """Label map with ungated positions set to the ignore marker."""
        return np.where(self.gate, self.label, IGNORE_INDEX).astype(np.int64)


def make_pseudo_label(probs, threshold: float = 0.95, exclude: Optional[np.ndarray] = None) -> PseudoLabel:
    """Argmax (lowest index wins ties), its probability, and the confidence gate.

    ``probs`` is detached; ``exclude`` marks positions that can never pass the
    gate (e.g. padding).
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    label = p.argmax(axis=-1)
    conf = p.max(axis=-1)
    gate = conf >= threshold
    if exclude is not None:
        gate = gate & ~exclude
    return PseudoLabel(label=label, confidence=conf, gate=gate)


def supervised_loss(pred: Tensor, labels: np.ndarray, from_logits: bool = False) -> Tensor:
    """Per-image mean CE over non-ignored pixels, averaged over the batch."""
    return tk.cross_entropy(pred, labels, from_logits=from_logits)


def unlabeled_loss(pred_s: Tensor, pred_fp: Tensor, pl: PseudoLabel, lambda_u: float,
                   from_logits: bool = False, normalize: str = "valid") -> Tensor:
    """``lambda_u * [CE(p_s, y) + CE(p_fp, y)]`` restricted to gated positions.

    With ``normalize="valid"`` each image's mean runs over its gated positions
    only; ``"all"`` divides by every pixel instead.
    """
    target = pl.gated_target()
    ce_s = tk.cross_entropy(pred_s, target, from_logits=from_logits, normalize=normalize)
    ce_fp = tk.cross_entropy(pred_fp, target, from_logits=from_logits, normalize=normalize)
    return tk.scalar_mul(tk.add(ce_s, ce_fp), lambda_u)
