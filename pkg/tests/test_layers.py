import numpy as np
import pytest

from mstar import autodiff as ad
from mstar.autodiff import Tensor
from mstar.layers import (AvgPool1d, BatchNorm1d, BatchNorm2d, Conv1d, Conv2d,
                          GlobalAvgPool1d, GlobalMaxPool1d, Linear, MaxPool1d,
                          Sequential, log_softmax)
from mstar.losses import bce, cross_entropy, kl_diag_gaussian, mse
from mstar.optim import grad_check

RNG = lambda s: np.random.default_rng(s)


def test_pointwise_identity_conv_passes_input_through():
    conv = Conv1d(3, 3, 1, RNG(0))
    conv.w.data = np.eye(3).reshape(3, 3, 1)
    conv.b.data[:] = 0.0
    x = RNG(1).normal(size=(2, 3, 10))
    assert np.allclose(conv(Tensor(x)).data, x, atol=1e-15)


def test_global_average_pool_of_ones():
    gap = GlobalAvgPool1d()
    out = gap(Tensor(np.ones((1, 2, 4))))
    assert np.array_equal(out.data, [[1.0, 1.0]])


def test_conv_impulse_support_width():
    conv = Conv1d(1, 1, 3, RNG(0), bias=False)
    conv.w.data = np.ones((1, 1, 3))
    x = np.zeros((1, 1, 21))
    x[0, 0, 10] = 1.0
    out = conv(Tensor(x)).data[0, 0]
    support = np.nonzero(out)[0]
    assert support.tolist() == [9, 10, 11]


@pytest.mark.parametrize("k", [1, 3, 5, 9, 19, 39, 20, 30, 60])
def test_same_length_contract_all_kernels(k):
    for L in (8, 33, 512):
        if k > 2 * L:  # padding longer than the signal is out of contract
            continue
        conv = Conv1d(2, 2, k, RNG(0))
        assert conv(Tensor(np.ones((1, 2, L)))).shape == (1, 2, L)


def test_batchnorm_train_normalizes_batch():
    bn = BatchNorm1d(3)
    x = RNG(2).normal(loc=5.0, scale=2.0, size=(8, 3, 20))
    out = bn(Tensor(x)).data
    assert np.allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-10)
    assert np.allclose(out.std(axis=(0, 2)), 1.0, atol=1e-2)


def test_batchnorm_eval_uses_running_stats():
    bn = BatchNorm1d(2)
    x = RNG(3).normal(loc=3.0, size=(16, 2, 8))
    # when running stats equal the batch stats, the two modes agree ...
    bn.running_mean = x.mean(axis=(0, 2))
    bn.running_var = x.var(axis=(0, 2))
    bn.eval()
    y_eval = bn(Tensor(x)).data
    bn.train()
    y_train = bn(Tensor(x)).data
    assert np.allclose(y_eval, y_train, atol=1e-12)
    # ... and otherwise they must not
    x2 = RNG(4).normal(loc=-7.0, size=(16, 2, 8))
    bn.eval()
    y2_eval = bn(Tensor(x2)).data
    bn.train()
    y2_train = bn(Tensor(x2)).data
    assert not np.allclose(y2_eval, y2_train, atol=1e-3)


def test_sequential_and_parameter_registry():
    net = Sequential(Conv1d(1, 4, 3, RNG(0)), BatchNorm1d(4))
    names = set(net.parameters())
    assert names == {"0/w", "0/b", "1/gamma", "1/beta"}


def test_state_roundtrip():
    net = Sequential(Conv1d(1, 4, 3, RNG(0)), BatchNorm1d(4))
    state = net.state_arrays()
    for p in net.parameters().values():
        p.data = p.data + 1.0
    net.load_state_arrays(state)
    assert all(np.array_equal(net.parameters()[k].data, v) for k, v in state.items())


# losses


def test_mse_of_identical_inputs_is_zero():
    x = RNG(5).normal(size=(4, 7))
    assert mse(Tensor(x), x).item() == 0.0


def test_kl_of_standard_normal_is_zero():
    mu = Tensor(np.zeros((3, 5)))
    log_var = Tensor(np.zeros((3, 5)))
    assert kl_diag_gaussian(mu, log_var).item() == 0.0


def test_cross_entropy_uniform_logits_is_log_k():
    for k in (2, 5, 11):
        logits = Tensor(np.zeros((4, k)))
        labels = np.arange(4) % k
        assert cross_entropy(logits, labels).item() == pytest.approx(np.log(k), rel=1e-12)


def test_bce_rejects_out_of_range_probabilities():
    with pytest.raises(ad.NumericsError):
        bce(Tensor(np.array([0.0, 0.5])), np.array([0.0, 1.0]))
    with pytest.raises(ad.NumericsError):
        bce(Tensor(np.array([1.0, 0.5])), np.array([0.0, 1.0]))


def test_bce_matches_closed_form():
    p = np.array([0.3, 0.8])
    y = np.array([1.0, 0.0])
    expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bce(Tensor(p), y).item() == pytest.approx(expected, rel=1e-12)


def test_log_softmax_rows_normalize():
    logits = Tensor(RNG(6).normal(size=(5, 7)) * 30)
    out = log_softmax(logits).data
    assert np.allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)


# gradient checks through composite layers


def test_gradcheck_linear_layer_tight():
    lin = Linear(6, 3, RNG(7))
    x = Tensor(RNG(8).normal(size=(4, 6)))
    weight = RNG(9).normal(size=(4, 3))

    def fn():
        return ad.tsum(ad.mul(lin(x), weight))

    assert grad_check(fn, lin.parameters()) < 1e-7


def test_gradcheck_conv_bn_relu_stack():
    rng = RNG(10)
    net = Sequential(Conv1d(2, 4, 5, rng), BatchNorm1d(4))
    x = Tensor(rng.normal(size=(3, 2, 12)) + 0.5)
    weight = rng.normal(size=(3, 4, 12))

    def fn():
        return ad.tsum(ad.mul(ad.relu(net(x)), weight))

    assert grad_check(fn, net.parameters()) < 1e-4


def test_gradcheck_identity_fragment_exact():
    # integer values with a power-of-two step make the difference quotient exact
    x = Tensor(np.arange(9.0).reshape(3, 3), requires_grad=True)

    def fn():
        return ad.tsum(x)

    assert grad_check(fn, {"x": x}, h=0.5) == 0.0


@pytest.mark.parametrize("layer_fn", [
    lambda rng: (Conv1d(2, 3, 9, rng), (2, 2, 15)),
    lambda rng: (Conv2d(2, 3, 3, rng), (2, 2, 6, 6)),
    lambda rng: (Linear(8, 3, rng), (4, 8)),
    lambda rng: (BatchNorm1d(3), (4, 3, 7)),
    lambda rng: (BatchNorm2d(3), (4, 3, 5, 5)),
    lambda rng: (MaxPool1d(3), (2, 3, 11)),
    lambda rng: (AvgPool1d(5), (2, 3, 11)),
    lambda rng: (GlobalAvgPool1d(), (2, 3, 11)),
    lambda rng: (GlobalMaxPool1d(), (2, 3, 11)),
])
@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_catalogue_layers(layer_fn, seed):
    rng = RNG(1000 + seed)
    layer, shape = layer_fn(rng)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    weight = rng.normal(size=np.asarray(layer(x).data).shape)
    params = dict(layer.parameters())
    params["x"] = x

    def fn():
        return ad.tsum(ad.mul(layer(x), weight))

    assert grad_check(fn, params, max_entries_per_param=40, rng=rng) < 1e-4
