import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slmpda import autodiff as ad
from slmpda.autodiff import Tape, Tensor, backward
from slmpda.models import LayerSpec, MlpParams, init_params, mlp_forward
from slmpda.selection import (BatchPartition, SelectConfig, average_hausdorff, gumbel_softmax,
                              gumbel_softmax_sample, partition_batch, select_all, select_loss)


def brute_hausdorff(X, Y):
    def directed(A, B):
        total = 0.0
        for a in A:
            total += min(math.dist(a, b) for b in B)
        return total / len(A)
    return 0.5 * (directed(X, Y) + directed(Y, X))


def test_symmetric_logits_no_noise_split_evenly():
    d = gumbel_softmax_sample((0.0, 0.0), 1.0, gumbel=(0.0, 0.0))
    assert d.soft == pytest.approx((0.5, 0.5))


def test_tiny_temperature_is_one_hot():
    d = gumbel_softmax_sample((0.3, 0.1), 1e-6, gumbel=(0.0, 0.5))
    assert d.hard == 0
    assert d.soft[1] == pytest.approx(1.0)


def test_gumbel_max_rate():
    rng = np.random.default_rng(0)
    la = np.tile([math.log(0.8), math.log(0.2)], (100_000, 1))
    _, hard, _ = gumbel_softmax(Tensor(la), 0.05, rng)
    assert abs(hard.mean() - 0.8) < 0.01


def test_non_positive_tau_rejected():
    with pytest.raises(ValueError):
        gumbel_softmax_sample((0.0, 0.0), 0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        SelectConfig(tau=-1.0)


def test_soft_sums_to_one_and_hard_is_argmax():
    rng = np.random.default_rng(1)
    soft, hard, st_val = gumbel_softmax(Tensor(rng.standard_normal((50, 2))), 0.7, rng)
    np.testing.assert_allclose(soft.data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(hard, (soft.data[:, 0] >= soft.data[:, 1]).astype(int))
    np.testing.assert_array_equal(st_val.data, hard)


def test_straight_through_gradient_follows_soft_sample():
    rng = np.random.default_rng(2)
    la0 = rng.standard_normal((4, 2))
    g = -np.log(-np.log(rng.random((4, 2))))
    w = rng.standard_normal(4)

    def grad(use_st):
        tape = Tape()
        la = tape.watch(la0)
        soft, _, st_val = gumbel_softmax(la, 0.5, gumbel=g)
        y = st_val if use_st else ad.reshape(ad.matmul(soft, Tensor(np.array([[1.0], [0.0]]))), (4,))
        return backward(tape, ad.sum(ad.mul(y, Tensor(w))))[la]

    np.testing.assert_allclose(grad(True), grad(False), atol=1e-14)


def _constant_selector(select_bias: float) -> MlpParams:
    return MlpParams([np.zeros((2, 3))], [np.array([select_bias, 0.0])])


def test_strongly_biased_selector_selects_everything():
    part = partition_batch(_constant_selector(50.0), np.ones((30, 3)), 1.0, np.random.default_rng(0))
    assert part.selected.size == 30 and part.discarded.size == 0


def test_symmetric_selector_selects_half():
    part = partition_batch(_constant_selector(0.0), np.zeros((10_000, 3)), 1.0, np.random.default_rng(3))
    assert abs(part.selected.size / 10_000 - 0.5) < 0.02


def test_partition_covers_batch_disjointly():
    H = init_params(LayerSpec((3, 4, 2)), np.random.default_rng(4))
    part = partition_batch(H, np.random.default_rng(5).standard_normal((40, 3)), 1.0, np.random.default_rng(6))
    assert set(part.selected) | set(part.discarded) == set(range(40))
    assert not set(part.selected) & set(part.discarded)
    assert len(part.decisions) == 40


def test_single_sample_batch():
    part = partition_batch(_constant_selector(0.0), np.zeros((1, 3)), 1.0, np.random.default_rng(0))
    assert (part.selected.size == 0) != (part.discarded.size == 0)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        partition_batch(_constant_selector(0.0), np.zeros((0, 3)), 1.0, np.random.default_rng(0))


def test_hausdorff_examples():
    X = np.random.default_rng(0).standard_normal((5, 3))
    assert average_hausdorff(X, X) == 0.0
    assert average_hausdorff([[0, 0]], [[3, 4]]) == pytest.approx(5.0)
    assert average_hausdorff([[0, 0], [1, 0]], [[0, 1]]) == pytest.approx(1.10355, abs=1e-5)


def test_hausdorff_rejects_bad_sets():
    with pytest.raises(ValueError):
        average_hausdorff(np.zeros((0, 2)), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        average_hausdorff(np.zeros((1, 2)), np.zeros((1, 3)))


def test_hausdorff_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(100):
        X = rng.standard_normal((rng.integers(1, 7), 3))
        Y = rng.standard_normal((rng.integers(1, 7), 3))
        assert abs(average_hausdorff(X, Y) - brute_hausdorff(X, Y)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 2), elements=st.floats(-10, 10)), arrays(np.float64, (3, 2), elements=st.floats(-10, 10)))
def test_hausdorff_symmetric_and_nonnegative(X, Y):
    a, b = average_hausdorff(X, Y), average_hausdorff(Y, X)
    assert a >= 0 and a == pytest.approx(b, abs=1e-12)


def _partition(hard, p=None):
    hard = np.asarray(hard)
    return BatchPartition(np.flatnonzero(hard == 1), np.flatnonzero(hard == 0), hard,
                          np.stack([hard, 1 - hard], axis=1).astype(float),
                          p_select=None if p is None else Tensor(p))


def test_inactive_hinge_contributes_nothing():
    # selected sample sits on the target, discarded one far away: d_sel - d_dis + margin < 0
    src = np.array([[0.0, 0.0], [10.0, 0.0]])
    tgt = np.array([[0.0, 0.0]])
    cfg = SelectConfig(margin=1.0, lambda_reg1=0.0, lambda_reg2=0.0)
    out = select_loss(_partition([1, 0]), src, tgt, Tensor(np.zeros((1, 3))), cfg)
    assert out.triplet.item() == 0.0
    assert out.d_sel < out.d_dis


def test_triplet_skipped_for_one_sided_partition():
    cfg = SelectConfig(lambda_reg1=0.0, lambda_reg2=0.0)
    out = select_loss(select_all(3), np.ones((3, 2)), np.zeros((2, 2)), Tensor(np.zeros((2, 3))), cfg)
    assert out.total.item() == 0.0 and out.d_sel is None


def test_half_probability_regulariser_value():
    cfg = SelectConfig(lambda_reg2=0.0)
    out = select_loss(_partition([1, 0, 1], p=np.full(3, 0.5)), np.zeros((3, 2)), np.zeros((1, 2)),
                      Tensor(np.zeros((1, 3))), cfg)
    assert out.reg_select.item() == pytest.approx(cfg.lambda_reg1 * -math.log(2))


def test_uniform_predictions_have_zero_diversity_term():
    cfg = SelectConfig(lambda_reg1=0.0)
    out = select_loss(select_all(2), np.zeros((2, 2)), np.zeros((4, 2)), Tensor(np.zeros((4, 5))), cfg)
    assert out.reg_diversity.item() == pytest.approx(0.0, abs=1e-12)


def test_select_loss_training_raises_shared_probability():
    """Frozen features: shared samples sit near the target cloud, outliers far from it.

    The selector starts undecided and the margin keeps the hinge active, so
    every step carries a triplet gradient.
    """
    rng = np.random.default_rng(0)
    shared = rng.normal([0.0, 0.0], 0.3, size=(32, 2))
    outlier = rng.normal([4.0, 4.0], 0.3, size=(32, 2))
    src = np.concatenate([shared, outlier])
    tgt = rng.normal([0.0, 0.0], 0.3, size=(32, 2))
    cfg = SelectConfig(margin=10.0, lambda_s=1.0, lambda_reg1=0.0, lambda_reg2=0.0)
    H = init_params(LayerSpec((2, 16, 2)), np.random.default_rng(1))
    H.weights[-1][:] = 0.0
    noise = np.random.default_rng(2)

    def p_select(x):
        return ad.softmax(mlp_forward(H, x)).data[:, 0].mean()

    start = p_select(shared)
    for _ in range(200):
        tape = Tape()
        Ht = H.attach(tape)
        loss = select_loss(partition_batch(Ht, src, 1.0, noise), src, tgt, Tensor(np.zeros((32, 3))), cfg).total
        if not loss.attached:
            continue
        g = backward(tape, loss)
        H = MlpParams([w.data - 0.05 * g[w] for w in Ht.weights], [b.data - 0.05 * g[b] for b in Ht.biases])
    assert p_select(shared) > start
    assert p_select(shared) > 0.9 and p_select(outlier) < 0.1
