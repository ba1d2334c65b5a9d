"""Weighted cross-entropies for the two task heads and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcomp import Tensor, clamp, elementwise_mul, log, sum as tsum

__all__ = [
    "PROB_CLAMP",
    "LabelWeights",
    "LossBreakdown",
    "compute_label_weights",
    "wmce",
    "wcce",
    "total_loss",
]

PROB_CLAMP = 1e-7


@dataclass
class LabelWeights:
    au_pos_weights: np.ndarray  # [c]
    expr_class_weights: np.ndarray  # [k]

    def __post_init__(self):
        self.au_pos_weights = np.asarray(self.au_pos_weights, dtype=np.float64)
        self.expr_class_weights = np.asarray(self.expr_class_weights, dtype=np.float64)
        for name, arr in (("au_pos_weights", self.au_pos_weights),
                          ("expr_class_weights", self.expr_class_weights)):
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ValueError(f"{name} must be finite and > 0")

    @classmethod
    def uniform(cls, c: int, k: int) -> "LabelWeights":
        return cls(np.ones(c), np.ones(k))

    def to_dict(self) -> dict:
        return {"au_pos_weights": self.au_pos_weights.tolist(),
                "expr_class_weights": self.expr_class_weights.tolist()}


def compute_label_weights(au_labels=None, expr_labels=None, c: int | None = None,
                          k: int | None = None, scheme: str = "inverse_frequency") -> LabelWeights:
    """Inverse-frequency weights from label counts.

    AU ``j`` gets ``N_neg / max(N_pos, 1)``; expression class ``j`` gets
    ``N / (k * max(N_j, 1))``. Missing labels (-1) are ignored. With
    ``scheme="none"`` every weight is 1. An AU that is never negative ends
    up with weight 0 by the formula; it is floored to 1 so weights stay
    positive.
    """
    au = None if au_labels is None else np.asarray(au_labels)
    ex = None if expr_labels is None else np.asarray(expr_labels)
    if (au is None or au.size == 0) and (ex is None or ex.size == 0):
        raise ValueError("cannot compute label weights from an empty dataset")
    if c is None:
        c = 0 if au is None else au.shape[1]
    if k is None:
        k = 0 if ex is None or ex.size == 0 else int(ex.max()) + 1
    if scheme == "none":
        return LabelWeights(np.ones(c), np.ones(k))
    if scheme != "inverse_frequency":
        raise ValueError(f"unknown weighting scheme {scheme!r}")

    au_w = np.ones(c)
    if au is not None and au.size:
        valid = au >= 0
        n_pos = ((au == 1) & valid).sum(axis=0)
        n_neg = ((au == 0) & valid).sum(axis=0)
        au_w = n_neg / np.maximum(n_pos, 1)
        au_w[au_w <= 0] = 1.0
    ex_w = np.ones(k)
    if ex is not None and ex.size:
        ex = ex[ex >= 0]
        if ex.size:
            counts = np.bincount(ex.astype(int), minlength=k)[:k]
            ex_w = ex.size / (k * np.maximum(counts, 1))
    return LabelWeights(au_w, ex_w)


def wmce(probs: Tensor, targets, weights) -> Tensor:
    """Weighted multi-label cross-entropy, averaged over batch and AUs.

    ``weights`` is a :class:`LabelWeights` or the per-AU positive weights.
    """
    t = np.asarray(targets, dtype=np.float64)
    if probs.shape != t.shape or probs.ndim != 2:
        raise ValueError(f"wmce: probs {probs.shape} vs targets {t.shape}")
    w = weights.au_pos_weights if isinstance(weights, LabelWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (t.shape[1],):
        raise ValueError(f"wmce: {w.shape[0]} weights for {t.shape[1]} AUs")
    pc = clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = elementwise_mul(log(pc), w * t)
    neg = elementwise_mul(log(1.0 - pc), 1.0 - t)
    return elementwise_mul(tsum(pos + neg), -1.0 / t.size)


def wcce(probs: Tensor, onehot, weights) -> Tensor:
    """Weighted categorical cross-entropy, averaged over the batch."""
    y = np.asarray(onehot, dtype=np.float64)
    if probs.shape != y.shape or probs.ndim != 2:
        raise ValueError(f"wcce: probs {probs.shape} vs one-hot {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("wcce: every target row must be one-hot")
    w = weights.expr_class_weights if isinstance(weights, LabelWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (y.shape[1],):
        raise ValueError(f"wcce: {w.shape[0]} weights for {y.shape[1]} classes")
    pc = clamp(probs, PROB_CLAMP, 1.0)
    return elementwise_mul(tsum(elementwise_mul(log(pc), y * w)), -1.0 / y.shape[0])


@dataclass
class LossBreakdown:
    wmce: float
    wcce: float
    bgc_au: float
    bgc_expr: float
    total: float

    def to_dict(self) -> dict:
        return dict(wmce=self.wmce, wcce=self.wcce, bgc_au=self.bgc_au, bgc_expr=self.bgc_expr, total=self.total)


def total_loss(wmce_term: Tensor, wcce_term: Tensor | None = None, bgc_au: Tensor | None = None,
               bgc_expr: Tensor | None = None) -> Tensor:
    """``(wmce + bgc_au) + (wcce + bgc_expr)``; absent terms count as 0."""
    au = wmce_term if bgc_au is None else wmce_term + bgc_au
    if wcce_term is None and bgc_expr is None:
        return au
    expr = wcce_term if bgc_expr is None else (bgc_expr if wcce_term is None else wcce_term + bgc_expr)
    return au + expr
