"""Layer semantics: parameter registration, batch norm statistics,
optimizer arithmetic against a hand-rolled reference."""

import numpy as np
import pytest

from conftest import assert_grad_close, numeric_gradient

from pillarfuse import autodiff as ad
from pillarfuse.autodiff import Tensor
from pillarfuse.errors import ShapeError
from pillarfuse.layers import (AdamW, BatchNorm1d, BatchNorm2d, ConvLayer,
                               LinearBnRelu, LinearLayer, Module)


class Inner(Module):
    def __init__(self):
        super().__init__()
        self.fc = LinearLayer(3, 2, np.random.default_rng(0))


class Outer(Module):
    def __init__(self):
        super().__init__()
        self.inner = Inner()
        self.stack = [LinearLayer(2, 2, np.random.default_rng(1)),
                      BatchNorm1d(2)]
        self.gain = Tensor(np.ones(1), requires_grad=True)
        self.offset = Tensor(np.zeros(1))  # buffer, not a parameter


def test_named_state_walks_nested_and_listed_children():
    names = dict(Outer().named_state())
    assert "inner.fc.weight" in names
    assert "stack.0.bias" in names
    assert "stack.1.running_mean" in names
    assert "gain" in names and "offset" in names


def test_named_parameters_excludes_buffers():
    params = dict(Outer().named_parameters())
    assert "offset" not in params
    assert "stack.1.running_mean" not in params
    assert "stack.1.gamma" in params
    assert all(t.requires_grad for t in params.values())


def test_train_flag_propagates_to_nested_modules():
    model = Outer()
    model.eval()
    assert not model.inner.training
    assert not model.stack[1].training
    model.train(True)
    assert model.stack[1].training


def test_state_dict_round_trip_and_mismatch_errors():
    model = Outer()
    state = model.state_dict()
    fresh = Outer()
    fresh.load_state_dict(state)
    for name, tensor in fresh.named_state():
        np.testing.assert_array_equal(tensor.data, state[name])

    with pytest.raises(ShapeError):
        fresh.load_state_dict({k: v for k, v in state.items()
                               if k != "gain"})
    bad = dict(state)
    bad["extra"] = np.zeros(1)
    with pytest.raises(ShapeError):
        fresh.load_state_dict(bad)
    wrong = dict(state)
    wrong["gain"] = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        fresh.load_state_dict(wrong)


# -- linear ---------------------------------------------------------------------


def test_linear_init_bounds_and_zero_bias():
    rng = np.random.default_rng(2)
    layer = LinearLayer(64, 32, rng)
    bound = np.sqrt(1.0 / 64)
    assert layer.weight.shape == (32, 64)
    assert np.abs(layer.weight.data).max() <= bound
    np.testing.assert_array_equal(layer.bias.data, np.zeros(32))


def test_linear_forward_matches_numpy_and_rejects_bad_width():
    rng = np.random.default_rng(3)
    layer = LinearLayer(3, 2, rng)
    x = rng.normal(size=(5, 3))
    out = layer(Tensor(x))
    np.testing.assert_allclose(out.data, x @ layer.weight.data.T
                               + layer.bias.data)
    with pytest.raises(ShapeError):
        layer(Tensor(np.ones((5, 4))))


# -- batch norm ----------------------------------------------------------------


def test_batchnorm_training_uses_biased_batch_variance():
    rng = np.random.default_rng(4)
    x = rng.normal(loc=3.0, scale=2.0, size=(64, 5))
    bn = BatchNorm1d(5)
    out = bn(Tensor(x)).data
    mean = x.mean(axis=0)
    var = x.var(axis=0)  # biased, ddof=0
    np.testing.assert_allclose(out, (x - mean) / np.sqrt(var + 1e-5),
                               atol=1e-12)


def test_batchnorm_running_stats_update_and_drive_eval():
    rng = np.random.default_rng(5)
    x = rng.normal(loc=-1.0, scale=0.5, size=(32, 3))
    bn = BatchNorm1d(3)
    bn(Tensor(x))
    np.testing.assert_allclose(bn.running_mean.data, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(bn.running_var.data,
                               0.9 * 1.0 + 0.1 * x.var(axis=0))
    bn.eval()
    y = rng.normal(size=(4, 3))
    out = bn(Tensor(y)).data
    expected = (y - bn.running_mean.data) / np.sqrt(bn.running_var.data
                                                    + 1e-5)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_batchnorm_update_running_flag_freezes_buffers():
    bn = BatchNorm1d(2)
    bn.update_running = False
    before = bn.running_mean.data.copy()
    bn(Tensor(np.random.default_rng(6).normal(size=(8, 2))))
    np.testing.assert_array_equal(bn.running_mean.data, before)


def test_batchnorm_single_row_collapses_to_beta():
    bn = BatchNorm1d(3)
    bn.beta.data[:] = [1.0, -2.0, 0.5]
    out = bn(Tensor(np.array([[10.0, -4.0, 7.0]])))
    np.testing.assert_allclose(out.data, [[1.0, -2.0, 0.5]], atol=1e-12)


def test_batchnorm_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    x_data = rng.normal(size=(6, 3))
    bn = BatchNorm1d(3)
    bn.update_running = False
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, size=3)
    bn.beta.data[:] = rng.normal(size=3)
    x = Tensor(x_data, requires_grad=True)
    ad.sum_(ad.sigmoid(bn(x))).backward()

    def f(arr):
        return ad.sum_(ad.sigmoid(bn(Tensor(arr)))).item()

    assert_grad_close(x.grad, numeric_gradient(f, x_data), rel=1e-5)


def test_batchnorm2d_equals_flattened_batchnorm1d():
    rng = np.random.default_rng(8)
    data = rng.normal(size=(3, 4, 5))
    bn2 = BatchNorm2d(3)
    bn1 = BatchNorm1d(3)
    out2 = bn2(Tensor(data)).data
    flat = data.transpose(1, 2, 0).reshape(20, 3)
    out1 = bn1(Tensor(flat)).data
    np.testing.assert_allclose(out2,
                               out1.reshape(4, 5, 3).transpose(2, 0, 1),
                               atol=1e-12)


# -- conv layer ----------------------------------------------------------------


def test_conv_layer_adds_bias_per_output_channel():
    rng = np.random.default_rng(9)
    layer = ConvLayer(2, 3, 3, rng, stride=1, padding=1)
    layer.bias.data[:] = [1.0, -1.0, 0.0]
    x = rng.normal(size=(2, 4, 4))
    out = layer(Tensor(x)).data
    no_bias = ad.conv2d(Tensor(x), layer.kernel, stride=1, padding=1).data
    np.testing.assert_allclose(out - no_bias,
                               np.array([1.0, -1.0, 0.0])[:, None, None]
                               * np.ones((3, 4, 4)))


def test_linear_bn_relu_output_is_nonnegative():
    rng = np.random.default_rng(10)
    block = LinearBnRelu(4, 6, rng)
    out = block(Tensor(rng.normal(size=(16, 4))))
    assert (out.data >= 0.0).all()
    assert (out.data > 0.0).any()


# -- optimizer ------------------------------------------------------------------


def adamw_reference(param, grad, m, v, t, lr, b1, b2, eps, wd):
    """Independent single-step AdamW update."""
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new_param = param - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * param)
    return new_param, m, v


def test_adamw_matches_reference_over_multiple_steps():
    rng = np.random.default_rng(11)
    p_data = rng.normal(size=(4,))
    p = Tensor(p_data.copy(), requires_grad=True)
    opt = AdamW([p], lr=0.01, betas=(0.9, 0.999), epsilon=1e-8,
                weight_decay=0.02)
    ref_p = p_data.copy()
    ref_m = np.zeros(4)
    ref_v = np.zeros(4)
    for t in range(1, 6):
        grad = rng.normal(size=(4,))
        p.grad = grad.copy()
        opt.step()
        ref_p, ref_m, ref_v = adamw_reference(
            ref_p, grad, ref_m, ref_v, t, 0.01, 0.9, 0.999, 1e-8, 0.02)
        np.testing.assert_allclose(p.data, ref_p, atol=1e-14)


def test_adamw_weight_decay_is_decoupled_from_moments():
    # with zero gradient, the only movement is the decay term
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_adamw_skips_params_without_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([5.0]), requires_grad=True)
    opt = AdamW([p, q], lr=0.1)
    p.grad = np.ones(1)
    opt.step()
    assert p.data[0] != 1.0
    np.testing.assert_array_equal(q.data, [5.0])


def test_zero_grad_clears_all_parameters():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p])
    p.grad = np.ones(1)
    opt.zero_grad()
    assert p.grad is None


def test_training_reduces_loss_on_small_regression():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(32, 3))
    target = x @ np.array([[1.0], [-2.0], [0.5]]) + 0.3
    layer = LinearLayer(3, 1, rng)
    opt = AdamW(layer.parameters(), lr=0.05, weight_decay=0.0)
    losses = []
    for _ in range(60):
        opt.zero_grad()
        pred = layer(Tensor(x))
        diff = pred - Tensor(target)
        loss = ad.mean(diff * diff)
        losses.append(loss.item())
        loss.backward()
        opt.step()
    assert losses[-1] < 0.05 * losses[0]
