"""Finite-difference gradient suite over every primitive and composite loss.

Each case builds a scalar function of one array plus a seeded evaluation
point.  Non-scalar primitives are reduced with a fixed random projection
``sum(out * R)`` so that every output entry contributes to the check.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .label import SoftPseudoLabel, label_loss
from .mix import MixBatch, mix_loss
from .models import ModelConfig, MlpParams, build_models, mlp_forward
from .objective import EntropyWeights, adv_loss, smooth_labels, supervised_loss
from .selection import _binary_neg_entropy, diversity_term, weighted_hausdorff

# A case returns (f, x) or (f, x, numeric_scale); see autodiff.grad_check.
Case = Callable[[np.random.Generator], tuple]
GRL_LAMBDA = 0.7


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    R = rng.standard_normal(out.shape)
    return lambda y: ad.sum(ad.mul(y, Tensor(R))) if y.data.ndim else y


def _unary(op, shape=(3, 4), lo=None):
    def case(rng):
        x = rng.standard_normal(shape)
        if lo is not None:
            x = lo + np.abs(x)
        proj = _project(op(Tensor(x)), rng)
        return (lambda t: proj(op(t))), x
    return case


def _binary_with(op, other_shape, shape=(3, 4), positive_other=False):
    def case(rng):
        x = rng.standard_normal(shape)
        c = rng.standard_normal(other_shape)
        if positive_other:
            c = 0.5 + np.abs(c)
        proj = _project(op(Tensor(x), Tensor(c)), rng)
        return (lambda t: proj(op(t, Tensor(c)))), x
    return case


def _right_operand(op, first_shape, shape):
    def case(rng):
        a = rng.standard_normal(first_shape)
        x = rng.standard_normal(shape)
        proj = _project(op(Tensor(a), Tensor(x)), rng)
        return (lambda t: proj(op(Tensor(a), t))), x
    return case


def _div_denominator(rng):
    a = rng.standard_normal((3, 4))
    x = 0.5 + np.abs(rng.standard_normal((3, 4)))
    proj = _project(ad.div(Tensor(a), Tensor(x)), rng)
    return (lambda t: proj(ad.div(Tensor(a), t))), x


def _concat(rng):
    a = rng.standard_normal((2, 3))
    x = rng.standard_normal((4, 3))
    op = lambda t: ad.concat_rows([Tensor(a), t, ad.scale(t, 2.0)])  # noqa: E731
    proj = _project(op(Tensor(x)), rng)
    return (lambda t: proj(op(t))), x


def _soft_ce(rng):
    y = rng.dirichlet(np.ones(5), size=4)
    op = lambda t: ad.soft_cross_entropy(t, y)  # noqa: E731
    x = rng.standard_normal((4, 5))
    proj = _project(op(Tensor(x)), rng)
    return (lambda t: proj(op(t))), x


def _bce(rng):
    y = rng.random(6)
    op = lambda t: ad.bce_with_logits(t, y)  # noqa: E731
    x = 2.0 * rng.standard_normal(6)
    proj = _project(op(Tensor(x)), rng)
    return (lambda t: proj(op(t))), x


# composite losses ----------------------------------------------------------


def _sup(rng):
    y = rng.integers(0, 5, size=6)
    target = smooth_labels(y, 5, 0.2)
    return (lambda t: supervised_loss(t, target)), rng.standard_normal((6, 5))


def _adv_features(rng):
    """Through the reversal: the features receive -lam times the forward derivative."""
    D = build_models(3, 4, rng, ModelConfig(g_hidden=(5,), feature_dim=4, d_hidden=(6, 6))).D
    w = EntropyWeights(1.0 + rng.random(5), 1.0 + rng.random(3))

    def f(t):
        return adv_loss(D, ad.take_rows(t, slice(0, 5)), ad.take_rows(t, slice(5, 8)), w, GRL_LAMBDA)
    return f, rng.standard_normal((8, 4)), -GRL_LAMBDA


def _adv_discriminator(rng):
    D = build_models(3, 4, rng, ModelConfig(g_hidden=(5,), feature_dim=4, d_hidden=(6, 6))).D
    w = EntropyWeights(1.0 + rng.random(5), 1.0 + rng.random(3))
    feats = rng.standard_normal((8, 4))

    def f(W):
        net = MlpParams([W, *D.weights[1:]], list(D.biases))
        return adv_loss(net, Tensor(feats[:5]), Tensor(feats[5:]), w, GRL_LAMBDA)
    return f, D.weights[0].copy()


def _select_triplet(rng):
    """Hinge of the weighted Hausdorff gap, differentiated in the relaxed membership."""
    src = rng.standard_normal((6, 3))
    tgt = rng.standard_normal((5, 3))
    mask = np.array([True, True, True, False, False, False])

    def f(z):
        w = ad.sigmoid(z)
        ones = Tensor(np.ones(6))
        gap = ad.add(ad.sub(weighted_hausdorff(w, src, tgt, mask),
                            weighted_hausdorff(ad.sub(ones, w), src, tgt, ~mask)), Tensor(50.0))
        return ad.scale(ad.relu(gap), 0.01)
    return f, rng.standard_normal(6)


def _select_reg(form):
    def case(rng):
        def f(logits):
            p = ad.reshape(ad.matmul(ad.softmax(logits), Tensor(np.array([[1.0], [0.0]]))), (logits.shape[0],))
            return ad.scale(_binary_neg_entropy(p, form), 10.0)
        return f, rng.standard_normal((7, 2))
    return case


def _select_diversity(rng):
    return (lambda t: ad.scale(diversity_term(t), 0.1)), rng.standard_normal((6, 4))


def _label(rng):
    probs = rng.dirichlet(np.ones(4), size=6)
    labels = [SoftPseudoLabel(p, float(p.max()), bool(k % 3)) for k, p in enumerate(probs)]
    return (lambda t: label_loss(t, labels)), rng.standard_normal((6, 4))


def _mix_case(which, net="G"):
    def case(rng):
        cfg = ModelConfig(g_hidden=(6,), feature_dim=4, d_hidden=(5,))
        base = build_models(3, 4, rng, cfg)
        n = 5
        lam = rng.random(n)
        batch = MixBatch(rng.standard_normal((n, 3)), rng.dirichlet(np.ones(4), size=n), lam,
                         np.array(["inter"] * n), lam)
        nets = base.nets()
        rest_w, rest_b = nets[net].weights[1:], nets[net].biases

        def f(W):
            swapped = dict(nets, **{net: MlpParams([W, *rest_w], list(rest_b))})
            models = type(base)(swapped["G"], swapped["F"], swapped["D"], swapped["H"], cfg)
            cls, dom = mix_loss(models, batch, GRL_LAMBDA)
            return cls if which == "cls" else dom
        x = nets[net].weights[0].copy()
        # the domain term reaches G only through the reversal
        return (f, x, -GRL_LAMBDA) if which == "dom" and net == "G" else (f, x)
    return case


def _mlp(rng):
    params = build_models(3, 4, rng, ModelConfig(g_hidden=(5,), feature_dim=4)).G
    proj = _project(mlp_forward(params, Tensor(np.zeros((4, 3)))), rng)
    return (lambda t: proj(mlp_forward(params, t))), rng.standard_normal((4, 3))


PRIMITIVE_CASES: dict[str, Case] = {
    "matmul": _right_operand(ad.matmul, (2, 3), (3, 4)),
    "matmul_left": _binary_with(ad.matmul, (4, 2)),
    "add": _binary_with(ad.add, (3, 4)),
    "add_row_bias": _right_operand(ad.add, (3, 4), (4,)),
    "sub": _right_operand(ad.sub, (3, 4), (3, 4)),
    "sub_scalar": _right_operand(ad.sub, (3, 4), ()),
    "add_scalar": _binary_with(ad.add, ()),
    "mul": _binary_with(ad.mul, (3, 4)),
    "div": _div_denominator,
    "scale": _unary(lambda t: ad.scale(t, -1.7)),
    "relu": _unary(ad.relu),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, lo=0.3),
    "square": _unary(ad.square),
    "sigmoid": _unary(ad.sigmoid),
    "softplus": _unary(lambda t: ad.softplus(ad.scale(t, 3.0))),
    "log_softmax": _unary(ad.log_softmax),
    "softmax": _unary(ad.softmax),
    "sum": _unary(lambda t: ad.sum(t, axis=0)),
    "mean": _unary(lambda t: ad.mean(t, axis=1)),
    "concat_rows": _concat,
    "take_rows": _unary(lambda t: ad.take_rows(t, np.array([2, 0, 2]))),
    "grl": lambda rng: (*_unary(lambda t: ad.grl(t, GRL_LAMBDA))(rng), -GRL_LAMBDA),
    "transpose": _unary(ad.transpose),
    "reshape": _unary(lambda t: ad.reshape(t, (2, 6))),
    "soft_cross_entropy": _soft_ce,
    "bce_with_logits": _bce,
    "mlp_forward": _mlp,
}

LOSS_CASES: dict[str, Case] = {
    "L_sup": _sup,
    "L_adv_features": _adv_features,
    "L_adv_discriminator": _adv_discriminator,
    "L_select_triplet": _select_triplet,
    "L_select_reg_binary": _select_reg("binary"),
    "L_select_reg_batch": _select_reg("batch"),
    "L_select_reg_literal": _select_reg("literal"),
    "L_select_diversity": _select_diversity,
    "L_label": _label,
    "L_mix_cls": _mix_case("cls"),
    "L_mix_dom": _mix_case("dom"),
    "L_mix_dom_discriminator": _mix_case("dom", net="D"),
}

ALL_CASES = {**PRIMITIVE_CASES, **LOSS_CASES}


@dataclass
class GradCheckRow:
    name: str
    max_error: float
    points: int

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def run_grad_suite(points: int = 10, seed: int = 0, eps: float = 1e-6,
                   cases: dict[str, Case] | None = None) -> tuple[list[GradCheckRow], float]:
    """Max relative error per case over ``points`` seeded evaluation points; also returns seconds taken."""
    start = time.perf_counter()
    rows = []
    for k, (name, case) in enumerate((cases or ALL_CASES).items()):
        worst = 0.0
        for i in range(points):
            f, x, *scale = case(np.random.default_rng([seed, k, i]))
            worst = max(worst, ad.grad_check(f, x, eps, *scale))
        rows.append(GradCheckRow(name, worst, points))
    return rows, time.perf_counter() - start


def format_table(rows: list[GradCheckRow], tol: float) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'case':<{width}}  max_rel_error  status"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.max_error:13.3e}  {'ok' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)
