"""Masked consistency in semantic space and the normalized overall objective."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensorkit as tk
from .phase1 import PseudoLabel, make_pseudo_label
from .tensorkit import Tensor

COMPONENTS = ("L_s", "L_u", "L_mimpi", "L_mimfea", "L_mimse")


@dataclass
class LossWeights:
    lambda_u: float = 0.5
    lambda_mp: float = 1.0 / 3.0
    lambda_mf: float = 0.05
    lambda_ms: float = 0.1 / 3.0
    psi: float = 0.95

    def __post_init__(self):
        for f in ("lambda_u", "lambda_mp", "lambda_mf", "lambda_ms"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be nonnegative")

    def active(self, use_unlabeled=True, use_mimpi=True, use_mimfea=True, use_mimse=True) -> "LossWeights":
        """Copy with disabled components' weights set to zero."""
        return LossWeights(
            lambda_u=self.lambda_u if use_unlabeled else 0.0,
            lambda_mp=self.lambda_mp if use_mimpi else 0.0,
            lambda_mf=self.lambda_mf if use_mimfea else 0.0,
            lambda_ms=self.lambda_ms if use_mimse else 0.0,
            psi=self.psi,
        )

    @property
    def normalizer(self) -> float:
        return (1.0 + 2.0 * self.lambda_u + 3.0 * self.lambda_mp
                + 3.0 * self.lambda_mf + 3.0 * self.lambda_ms)


@dataclass
class LossReport:
    L_s: float = 0.0
    L_u: float = 0.0
    L_mimpi: float = 0.0
    L_mimfea: float = 0.0
    L_mimse: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def pseudo_label_for_semantic_targets(probs_l, probs_s, probs_fp):
    """Ungated argmax targets from the original (unmasked) streams, detached."""
    return tuple(make_pseudo_label(p, threshold=0.0) for p in (probs_l, probs_s, probs_fp))


def semantic_mim_loss(preds: Sequence[Tensor], targets: Sequence[PseudoLabel], lambda_ms: float,
                      from_logits: bool = False, gated: bool = False,
                      threshold: Optional[float] = None) -> Tensor:
    """``lambda_ms * sum_k CE(masked_pred_k, original_target_k)``.

    Every position supervises unless ``gated`` is set, in which case targets
    below ``threshold`` confidence are ignored.
    """
    if len(preds) != len(targets):
        raise ValueError("need one target per masked prediction")
    total = None
    for pred, tgt in zip(preds, targets):
        if gated:
            thr = 0.0 if threshold is None else threshold
            y = np.where(tgt.confidence >= thr, tgt.label, tk.IGNORE_INDEX)
        else:
            y = tgt.label
        ce = tk.cross_entropy(pred, y, from_logits=from_logits)
        total = ce if total is None else tk.add(total, ce)
    return tk.scalar_mul(total, lambda_ms)


def semantic_mim_mse(masked_probs: Sequence[Tensor], original_probs: Sequence[np.ndarray],
                     lambda_ms: float) -> Tensor:
    """Variant: squared error between masked and original class distributions."""
    total = None
    for p, q in zip(masked_probs, original_probs):
        q = q.data if isinstance(q, Tensor) else q
        term = tk.scalar_mul(tk.mse(p, q), p.shape[-1])  # sum over classes, mean over pixels
        total = term if total is None else tk.add(total, term)
    return tk.scalar_mul(total, lambda_ms)


def total_loss(components: Dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Sum of the five components divided by ``1 + 2lu + 3lmp + 3lmf + 3lms``.

    Pass weights from :meth:`LossWeights.active` so disabled terms also drop
    out of the normalizer.
    """
    acc = None
    for name in COMPONENTS:
        t = components.get(name)
        if t is None:
            continue
        t = tk.as_tensor(t)
        acc = t if acc is None else tk.add(acc, t)
    if acc is None:
        acc = tk.Tensor(0.0)
    return tk.scalar_div(acc, weights.normalizer)
