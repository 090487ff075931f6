"""Source-sample selection with a straight-through Gumbel-Softmax selector.

The selector H emits two logits per source sample, column 0 = select and
column 1 = discard.  In the forward pass each sample is hard-assigned by
the Gumbel-max rule; in the backward pass the gradient of the relaxed
(soft) sample is used instead.

H is trained by ``select_loss`` alone.  Everything downstream of the
partition (supervised, adversarial, mix losses) sees only the hard,
detached mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import MlpParams, mlp_forward

REG1_FORMS = ("binary", "literal", "batch")
_SELECT_COL = np.array([[1.0], [0.0]])


@dataclass(frozen=True)
class SelectConfig:
    tau: float = 1.0
    margin: float = 1.0
    lambda_s: float = 0.01
    lambda_reg1: float = 10.0
    lambda_reg2: float = 0.1
    # binary: mean of p log p + (1-p) log(1-p); literal: mean of p log p;
    # batch: binary entropy term applied to the batch-mean select probability
    reg1_form: str = "binary"
    use_hausdorff: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"select.tau must be > 0, got {self.tau}")
        for name in ("margin", "lambda_s", "lambda_reg1", "lambda_reg2"):
            if getattr(self, name) < 0:
                raise ValueError(f"select.{name} must be >= 0, got {getattr(self, name)}")
        if self.reg1_form not in REG1_FORMS:
            raise ValueError(f"select.reg1_form must be one of {REG1_FORMS}, got {self.reg1_form!r}")


@dataclass
class SelectionDecision:
    soft: tuple[float, float]  # (y_select, y_discard)
    hard: int  # 1 = select
    st_value: Tensor | None = None


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel draws, -log(-log U) with U ~ Uniform(0, 1)."""
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def gumbel_softmax(log_alpha: Tensor, tau: float, rng: np.random.Generator | None = None,
                   gumbel: np.ndarray | None = None):
    """Batched binary Gumbel-Softmax.

    Returns ``(soft, hard, st)``: soft is an (n, 2) Tensor, hard an (n,) int
    array (1 = select) and st an (n,) Tensor equal to ``hard`` in value but
    differentiating like ``soft[:, 0]``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    log_alpha = ad.as_tensor(log_alpha)
    if gumbel is None:
        gumbel = sample_gumbel(log_alpha.shape, rng)
    perturbed = log_alpha.data + gumbel
    soft = ad.softmax(ad.scale(ad.add(log_alpha, Tensor(gumbel)), 1.0 / tau))
    # argmax on the perturbed logits themselves; the softmax can saturate at tiny tau
    hard = (perturbed[:, 0] >= perturbed[:, 1]).astype(np.int64)
    soft_sel = ad.reshape(ad.matmul(soft, Tensor(_SELECT_COL)), (soft.shape[0],))
    st = ad.add(soft_sel, Tensor(hard - soft_sel.data))
    return soft, hard, st


def gumbel_softmax_sample(log_alpha, tau: float, rng: np.random.Generator | None = None,
                          gumbel=None) -> SelectionDecision:
    """Single-sample form; ``log_alpha`` is a (select, discard) pair."""
    la = log_alpha if isinstance(log_alpha, Tensor) else Tensor(np.asarray(log_alpha, dtype=float))
    la = ad.reshape(la, (1, 2))
    g = None if gumbel is None else np.asarray(gumbel, dtype=float).reshape(1, 2)
    soft, hard, st = gumbel_softmax(la, tau, rng, g)
    return SelectionDecision((float(soft.data[0, 0]), float(soft.data[0, 1])), int(hard[0]),
                             ad.reshape(st, ()))


@dataclass
class BatchPartition:
    selected: np.ndarray  # row indices into the source batch
    discarded: np.ndarray
    hard: np.ndarray  # (n,) 0/1
    soft: np.ndarray  # (n, 2)
    st: Tensor | None = None  # straight-through select value, tape-attached when H is
    p_select: Tensor | None = None  # H's select probability (no noise)
    _decisions: list | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return int(self.hard.shape[0])

    @property
    def decisions(self) -> list[SelectionDecision]:
        if self._decisions is None:
            self._decisions = [
                SelectionDecision((float(s[0]), float(s[1])), int(h)) for s, h in zip(self.soft, self.hard)
            ]
        return self._decisions


def partition_batch(H: MlpParams, x, tau: float, rng: np.random.Generator) -> BatchPartition:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("cannot partition an empty batch")
    log_alpha = ad.log_softmax(mlp_forward(H, x))
    soft, hard, st = gumbel_softmax(log_alpha, tau, rng)
    p_select = ad.reshape(ad.matmul(ad.exp(log_alpha), Tensor(_SELECT_COL)), (x.shape[0],))
    return BatchPartition(
        selected=np.flatnonzero(hard == 1),
        discarded=np.flatnonzero(hard == 0),
        hard=hard,
        soft=soft.data.copy(),
        st=st,
        p_select=p_select,
    )


def select_all(n: int) -> BatchPartition:
    """Partition used when the select module is switched off."""
    return BatchPartition(np.arange(n), np.zeros(0, dtype=np.int64), np.ones(n, dtype=np.int64),
                          np.tile([1.0, 0.0], (n, 1)))


# ---------------------------------------------------------------------------
# distances


def pairwise_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def average_hausdorff(X, Y) -> float:
    """Symmetric mean of nearest-neighbour Euclidean distances between two sets."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0 or Y.shape[0] == 0 or X.size == 0 or Y.size == 0:
        raise ValueError("average_hausdorff needs two non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature widths differ: {X.shape[1]} vs {Y.shape[1]}")
    d = pairwise_distances(X, Y)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def weighted_hausdorff(weights: Tensor, src: np.ndarray, tgt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Average Hausdorff between the weighted source subset and the target set.

    ``weights`` are the straight-through membership values (0/1 in value),
    ``mask`` the matching hard membership.  Features are constants here, so
    the only gradient path is through the membership weights of the
    source-to-target half.
    """
    d = pairwise_distances(src, tgt)
    nn_src = Tensor(d.min(axis=1))
    nn_tgt = d[mask.astype(bool)].min(axis=0).mean()
    src_half = ad.div(ad.sum(ad.mul(weights, nn_src)), ad.sum(weights))
    return ad.scale(ad.add(src_half, Tensor(nn_tgt)), 0.5)


# ---------------------------------------------------------------------------
# loss


@dataclass
class SelectLoss:
    total: Tensor
    triplet: Tensor
    reg_select: Tensor
    reg_diversity: Tensor
    d_sel: float | None
    d_dis: float | None


def _binary_neg_entropy(p: Tensor, form: str) -> Tensor:
    q = ad.sub(Tensor(np.ones(p.shape)), p)
    if form == "literal":
        return ad.mean(ad.mul(p, ad.log(p)))
    if form == "batch":
        pm = ad.mean(p)
        qm = ad.mean(q)
        return ad.add(ad.mul(pm, ad.log(pm)), ad.mul(qm, ad.log(qm)))
    return ad.mean(ad.add(ad.mul(p, ad.log(p)), ad.mul(q, ad.log(q))))


def diversity_term(target_logits: Tensor) -> Tensor:
    """Mean per-sample prediction entropy minus entropy of the mean prediction."""
    ls = ad.log_softmax(target_logits)
    probs = ad.exp(ls)
    per_sample = ad.scale(ad.sum(ad.mul(probs, ls), axis=-1), -1.0)
    pm = ad.mean(probs, axis=0)
    ent_mean = ad.scale(ad.sum(ad.mul(pm, ad.log(pm))), -1.0)
    return ad.sub(ad.mean(per_sample), ent_mean)


def select_loss(partition: BatchPartition, source_features, target_features, target_logits: Tensor,
                cfg: SelectConfig) -> SelectLoss:
    """Hausdorff triplet on detached G-features plus the two regularisers.

    ``source_features``/``target_features`` are G's outputs for the whole
    source batch and the target batch; they enter as constants.
    """
    src = np.asarray(source_features.data if isinstance(source_features, Tensor) else source_features)
    tgt = np.asarray(target_features.data if isinstance(target_features, Tensor) else target_features)
    if tgt.shape[0] == 0:
        raise ValueError("select_loss needs a non-empty target batch")
    zero = Tensor(0.0)
    st = partition.st if partition.st is not None else Tensor(partition.hard.astype(float))
    d_sel = d_dis = None
    triplet = zero
    if cfg.use_hausdorff and partition.selected.size and partition.discarded.size:
        sel_mask = partition.hard == 1
        ones = Tensor(np.ones(st.shape))
        ds = weighted_hausdorff(st, src, tgt, sel_mask)
        dd = weighted_hausdorff(ad.sub(ones, st), src, tgt, ~sel_mask)
        d_sel, d_dis = ds.item(), dd.item()
        gap = ad.add(ad.sub(ds, dd), Tensor(cfg.margin))
        if gap.item() > 0:
            triplet = ad.scale(gap, cfg.lambda_s)
    reg_select = zero
    if partition.p_select is not None and cfg.lambda_reg1 > 0:
        reg_select = ad.scale(_binary_neg_entropy(partition.p_select, cfg.reg1_form), cfg.lambda_reg1)
    reg_div = zero
    if cfg.lambda_reg2 > 0:
        reg_div = ad.scale(diversity_term(target_logits), cfg.lambda_reg2)
    total = ad.add(ad.add(triplet, reg_select), reg_div)
    return SelectLoss(total, triplet, reg_select, reg_div, d_sel, d_dis)
