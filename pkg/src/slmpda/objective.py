"""Supervised, entropy-weighted adversarial and total losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import MlpParams, grl, mlp_forward


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"smoothing.epsilon must lie in [0, 1), got {self.epsilon}")


def smooth_labels(y, n_classes: int, epsilon: float) -> np.ndarray:
    """(1 - eps) on the true class, eps / (C - 1) elsewhere.  Accepts an int or an int array."""
    if n_classes < 2:
        raise ValueError("label smoothing needs at least two classes")
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"class index out of range [0, {n_classes})")
    out = np.full(y.shape + (n_classes,), epsilon / (n_classes - 1))
    np.put_along_axis(out, y[..., None], 1.0 - epsilon, axis=-1)
    return out


def supervised_loss(logits: Tensor, smoothed) -> Tensor:
    """Mean soft cross-entropy of selected-source logits; 0 for an empty selection."""
    if logits.shape[0] == 0:
        return Tensor(0.0)
    return ad.mean(ad.soft_cross_entropy(logits, smoothed))


def entropy(p, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis)


def entropy_weight(pred) -> np.ndarray:
    """1 + exp(-H(pred)); lies in (1, 2]."""
    return 1.0 + np.exp(-entropy(pred))


@dataclass
class EntropyWeights:
    w_s: np.ndarray
    w_t: np.ndarray

    @classmethod
    def from_predictions(cls, src_probs, tgt_probs) -> "EntropyWeights":
        return cls(entropy_weight(src_probs) if len(src_probs) else np.zeros(0),
                   entropy_weight(tgt_probs) if len(tgt_probs) else np.zeros(0))

    @classmethod
    def uniform(cls, ns: int, nt: int) -> "EntropyWeights":
        return cls(np.ones(ns), np.ones(nt))


def adv_loss(D: MlpParams, src_feats: Tensor, tgt_feats: Tensor, weights: EntropyWeights,
             grl_lambda: float) -> Tensor:
    """Entropy-weighted domain BCE (source = 1, target = 0) through the gradient reversal.

    Weights are normalised to sum to one within each side; the result is
    the mean over the non-empty sides.
    """
    sides = []
    for feats, w, target in ((src_feats, weights.w_s, 1.0), (tgt_feats, weights.w_t, 0.0)):
        n = feats.shape[0]
        if n == 0:
            continue
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (n,) or np.any(w <= 0):
            raise ValueError("adversarial weights must be positive, one per sample")
        logits = ad.reshape(mlp_forward(D, grl(feats, grl_lambda)), (n,))
        per = ad.bce_with_logits(logits, np.full(n, target))
        sides.append(ad.sum(ad.mul(per, Tensor(w / w.sum()))))
    if not sides:
        return Tensor(0.0)
    if len(sides) == 1:
        return sides[0]
    return ad.scale(ad.add(sides[0], sides[1]), 0.5)


LOSS_TERMS = ("sup", "adv", "select", "label", "mix_cls", "mix_dom")


@dataclass
class LossBreakdown:
    sup: float = 0.0
    adv: float = 0.0
    select: float = 0.0
    label: float = 0.0
    mix_cls: float = 0.0
    mix_dom: float = 0.0
    total: float = 0.0
    selected_count: int = 0
    discarded_count: int = 0
    accepted_count: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extras = d.pop("extras")
        d.update(extras)
        return d


def total_loss(parts: dict[str, Tensor], multipliers: dict[str, float] | None = None,
               counts: dict[str, int] | None = None) -> tuple[Tensor, LossBreakdown]:
    """Sum of the six terms (each optionally scaled, default 1).

    Missing terms count as 0.  Returns the tape scalar and its breakdown,
    whose ``total`` is the float sum of the recorded components.
    """
    unknown = set(parts) - set(LOSS_TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    mult = {k: 1.0 for k in LOSS_TERMS}
    mult.update(multipliers or {})
    scaled = {}
    for k in LOSS_TERMS:
        t = parts.get(k)
        scaled[k] = Tensor(0.0) if t is None else (t if mult[k] == 1.0 else ad.scale(t, mult[k]))
    root = scaled[LOSS_TERMS[0]]
    for k in LOSS_TERMS[1:]:
        root = ad.add(root, scaled[k])
    vals = {k: scaled[k].item() for k in LOSS_TERMS}
    bd = LossBreakdown(**vals, total=float(np.sum(list(vals.values()))), **(counts or {}))
    return root, bd
