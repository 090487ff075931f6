"""Soft pseudo-labels for target samples and the self-training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class SharpenConfig:
    alpha: float = 0.1
    threshold: float = 0.3
    hard: bool = False  # one-hot pseudo-labels instead of sharpened ones (ablation)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"label.alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.threshold < 1.0:
            raise ValueError(f"label.threshold must lie in [0, 1), got {self.threshold}")


@dataclass
class SoftPseudoLabel:
    probs: np.ndarray
    confidence: float
    accepted: bool


def sharpen(p, alpha: float) -> np.ndarray:
    """p ** (1/alpha), renormalised along the last axis.

    Computed in log space so that tiny alpha does not underflow every entry.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(p) / alpha
    logp = logp - logp.max(axis=-1, keepdims=True)
    out = np.exp(logp)
    return out / out.sum(axis=-1, keepdims=True)


def pseudo_label_batch(probs, cfg: SharpenConfig) -> list[SoftPseudoLabel]:
    """Pseudo-labels from classifier softmax outputs computed without a tape.

    ``probs`` is the (n, C) softmax of F(G(x)) on a frozen model view.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("pseudo_label_batch needs a non-empty (n, C) probability array")
    conf = probs.max(axis=1)
    if cfg.hard:
        targets = np.eye(probs.shape[1])[probs.argmax(axis=1)]
    else:
        targets = sharpen(probs, cfg.alpha)
    return [SoftPseudoLabel(t, float(c), bool(c >= cfg.threshold)) for t, c in zip(targets, conf)]


def pseudo_label_model(model, x, cfg: SharpenConfig) -> list[SoftPseudoLabel]:
    """Convenience: run ``model`` (a ModelBundle) frozen on ``x`` and label it."""
    return pseudo_label_batch(model.predict_proba(x), cfg)


def stack_accepted(labels: list[SoftPseudoLabel]) -> tuple[np.ndarray, np.ndarray]:
    """(indices, label matrix) of the accepted entries."""
    idx = np.array([i for i, lab in enumerate(labels) if lab.accepted], dtype=np.int64)
    if idx.size == 0:
        return idx, np.zeros((0, labels[0].probs.shape[0] if labels else 0))
    return idx, np.stack([labels[i].probs for i in idx])


def label_loss(target_logits: Tensor, labels: list[SoftPseudoLabel]) -> Tensor:
    """Mean soft cross-entropy over accepted samples; exactly 0 if none are accepted.

    ``target_logits`` are F(G(x)) for the whole target batch, in batch order.
    """
    idx, y = stack_accepted(labels)
    if idx.size == 0:
        return Tensor(0.0)
    return ad.mean(ad.soft_cross_entropy(ad.take_rows(target_logits, idx), y))
