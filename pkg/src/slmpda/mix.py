"""Inter-domain and intra-domain mixup and the losses built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelBundle, grl, mlp_forward

KINDS = ("inter", "intra_src", "intra_tgt")


@dataclass(frozen=True)
class MixConfig:
    beta_alpha: float = 2.0
    use_cls: bool = True
    use_dom: bool = True

    def __post_init__(self):
        if not self.beta_alpha > 0:
            raise ValueError(f"mix.beta_alpha must be > 0, got {self.beta_alpha}")


@dataclass
class MixedSample:
    input: np.ndarray
    label: np.ndarray
    lam: float
    kind: str
    domain_label: float


@dataclass
class MixBatch:
    """Column-stacked mixed samples; iterating yields MixedSample views."""

    inputs: np.ndarray  # (m, d)
    labels: np.ndarray  # (m, C)
    lam: np.ndarray  # (m,)
    kinds: np.ndarray  # (m,) str
    domain_labels: np.ndarray  # (m,)

    def __len__(self):
        return int(self.inputs.shape[0])

    def __iter__(self):
        for i in range(len(self)):
            yield MixedSample(self.inputs[i], self.labels[i], float(self.lam[i]), str(self.kinds[i]),
                              float(self.domain_labels[i]))

    def count(self, kind: str) -> int:
        return int(np.sum(self.kinds == kind))


def sample_mix_ratio(cfg: MixConfig, rng: np.random.Generator, size=None):
    return rng.beta(cfg.beta_alpha, cfg.beta_alpha, size=size)


def mix_pair(a, b, ya, yb, lam):
    """Convex combination of one pair of inputs and labels."""
    return lam * np.asarray(a) + (1 - lam) * np.asarray(b), lam * np.asarray(ya) + (1 - lam) * np.asarray(yb)


def _partners(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Each pool member paired with a different member (itself only when n == 1)."""
    order = rng.permutation(n)
    return order, np.roll(order, -1)


def build_mix_batches(src_x, src_y, tgt_x, tgt_y, cfg: MixConfig, rng: np.random.Generator) -> MixBatch:
    """Mix selected source samples (smoothed labels) with accepted targets (pseudo-labels).

    Any pool may be empty; the corresponding sets then come out empty.
    """
    src_x, src_y = np.asarray(src_x, float), np.asarray(src_y, float)
    tgt_x, tgt_y = np.asarray(tgt_x, float), np.asarray(tgt_y, float)
    ns, nt = len(src_x), len(tgt_x)
    width = src_x.shape[1] if ns else tgt_x.shape[1] if nt else 0
    n_cls = src_y.shape[1] if ns else tgt_y.shape[1] if nt else 0

    a_x, a_y, b_x, b_y, kinds, dom_a, dom_b = [], [], [], [], [], [], []

    k = min(ns, nt)
    if k:
        i = rng.permutation(ns)[:k]
        j = rng.permutation(nt)[:k]
        a_x.append(src_x[i]); a_y.append(src_y[i]); b_x.append(tgt_x[j]); b_y.append(tgt_y[j])
        kinds += ["inter"] * k; dom_a += [1.0] * k; dom_b += [0.0] * k
    for pool_x, pool_y, kind, dom in ((src_x, src_y, "intra_src", 1.0), (tgt_x, tgt_y, "intra_tgt", 0.0)):
        n = len(pool_x)
        if n:
            i, j = _partners(n, rng)
            a_x.append(pool_x[i]); a_y.append(pool_y[i]); b_x.append(pool_x[j]); b_y.append(pool_y[j])
            kinds += [kind] * n; dom_a += [dom] * n; dom_b += [dom] * n

    m = len(kinds)
    if m == 0:
        return MixBatch(np.zeros((0, width)), np.zeros((0, n_cls)), np.zeros(0), np.array([], dtype=str),
                        np.zeros(0))
    lam = sample_mix_ratio(cfg, rng, size=m)
    A, B = np.concatenate(a_x), np.concatenate(b_x)
    YA, YB = np.concatenate(a_y), np.concatenate(b_y)
    l = lam[:, None]
    dom = lam * np.array(dom_a) + (1 - lam) * np.array(dom_b)
    return MixBatch(l * A + (1 - l) * B, l * YA + (1 - l) * YB, lam, np.array(kinds), dom)


def mix_loss(models: ModelBundle, mixed: MixBatch, grl_lambda: float, cfg: MixConfig | None = None):
    """(mix_cls, mix_dom) as scalar Tensors; both 0 for an empty batch.

    mix_cls: soft cross-entropy of F(G(x)) against the mixed label.
    mix_dom: logit BCE of D(grl(G(x))) against the mixed domain label
    (lam for inter pairs, 1 intra-source, 0 intra-target).
    """
    cfg = cfg or MixConfig()
    zero = Tensor(0.0)
    if len(mixed) == 0 or not (cfg.use_cls or cfg.use_dom):
        return zero, zero
    feats = mlp_forward(models.G, mixed.inputs)
    mix_cls = zero
    if cfg.use_cls:
        mix_cls = ad.mean(ad.soft_cross_entropy(mlp_forward(models.F, feats), mixed.labels))
    mix_dom = zero
    if cfg.use_dom:
        logits = ad.reshape(mlp_forward(models.D, grl(feats, grl_lambda)), (len(mixed),))
        mix_dom = ad.mean(ad.bce_with_logits(logits, mixed.domain_labels))
    return mix_cls, mix_dom
