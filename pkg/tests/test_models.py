import numpy as np
import pytest

from slmpda import autodiff as ad
from slmpda.autodiff import Tape, Tensor, backward
from slmpda.models import (GrlLambda, LayerSpec, MlpParams, ModelConfig, build_models, grl, init_params,
                           mlp_forward)


def test_init_is_deterministic():
    spec = LayerSpec((3, 5, 2))
    a = init_params(spec, np.random.default_rng(4)).arrays()
    b = init_params(spec, np.random.default_rng(4)).arrays()
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_init_biases_zero_and_weights_bounded():
    p = init_params(LayerSpec((6, 10, 6)), np.random.default_rng(0))
    assert all(np.all(b == 0) for b in p.biases)
    assert np.all(np.abs(p.weights[0]) <= 1.0)
    assert np.abs(p.weights[1]).max() <= np.sqrt(6 / 10)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec((3,))
    with pytest.raises(ValueError):
        LayerSpec((3, 0, 2))


def test_zero_network_outputs_zero():
    p = MlpParams([np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    assert np.all(mlp_forward(p, np.ones((5, 3))).data == 0)


def test_identity_layer():
    x = np.random.default_rng(0).standard_normal((4, 3))
    p = MlpParams([np.eye(3)], [np.zeros(3)])
    np.testing.assert_array_equal(mlp_forward(p, x).data, x)


def test_no_cross_sample_coupling():
    rng = np.random.default_rng(1)
    p = init_params(LayerSpec((3, 8, 2)), rng)
    x = rng.standard_normal((2, 3))
    both = mlp_forward(p, x).data
    one = np.concatenate([mlp_forward(p, x[:1]).data, mlp_forward(p, x[1:]).data])
    np.testing.assert_allclose(both, one, rtol=1e-12, atol=1e-14)


def test_forward_rejects_wrong_width():
    p = init_params(LayerSpec((3, 2)), np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        mlp_forward(p, np.ones((2, 4)))


def test_grl_identity_forward_and_reversed_backward():
    x0 = np.array([[1.0, -2.0, 3.0]])
    for lam in (0.0, 0.3, 1.0):
        assert np.array_equal(grl(Tensor(x0), lam).data, x0)
    tape = Tape()
    x = tape.watch(x0)
    np.testing.assert_array_equal(backward(tape, ad.sum(grl(x, 1.0)))[x], -np.ones((1, 3)))
    tape = Tape()
    x = tape.watch(x0)
    np.testing.assert_array_equal(backward(tape, ad.sum(grl(x, GrlLambda(0.0))))[x], np.zeros((1, 3)))


def test_grl_lambda_range():
    with pytest.raises(ValueError):
        GrlLambda(1.5)


def test_bundle_shapes_and_defaults():
    m = build_models(2, 8, np.random.default_rng(0))
    assert m.G.out_dim == 32 and m.F.out_dim == 8 and m.D.out_dim == 1 and m.H.out_dim == 2
    assert len(m.F.weights) == 1  # linear head
    assert len(m.D.weights) == 3
    for b in (1, 7):
        assert m.logits(np.zeros((b, 2))).shape == (b, 8)


def test_selector_head_starts_undecided():
    m = build_models(2, 8, np.random.default_rng(0))
    out = mlp_forward(m.H, np.random.default_rng(1).standard_normal((5, 2)) * 4).data
    np.testing.assert_array_equal(out, np.zeros((5, 2)))
    m2 = build_models(2, 8, np.random.default_rng(0), ModelConfig(selector_zero_head=False))
    assert np.any(m2.H.weights[-1] != 0)


def test_frozen_and_copy_are_independent():
    m = build_models(2, 3, np.random.default_rng(0))
    c = m.copy()
    c.G.weights[0][0, 0] += 1.0
    assert m.G.weights[0][0, 0] != c.G.weights[0][0, 0]
    frozen = m.frozen()
    assert not frozen.G.weights[0].attached
