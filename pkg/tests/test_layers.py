"""Module bookkeeping and the thin layer wrappers over the tape kernels."""

import math

import numpy as np

import oracles
from adod.layers import (
    BatchNorm2d,
    Conv2d,
    ConvBNLeaky,
    Linear,
    Module,
    ModuleList,
    bias_uniform,
    kaiming_uniform,
)
from adod.tensor import Parameter, Tensor


class Toy(Module):
    def __init__(self, rng):
        super().__init__()
        self.scale = Parameter(np.ones(3))
        self.inner = Linear(3, 2, rng)
        self.stack = ModuleList([BatchNorm2d(2), BatchNorm2d(2)])

    def forward(self, x):
        return self.inner(x * self.scale)


def test_named_parameters_use_dotted_paths(rng):
    toy = Toy(rng)
    names = [n for n, _ in toy.named_parameters()]
    assert names == [
        "scale",
        "inner.weight",
        "inner.bias",
        "stack.0.gamma",
        "stack.0.beta",
        "stack.1.gamma",
        "stack.1.beta",
    ]


def test_named_buffers_cover_module_list_children(rng):
    toy = Toy(rng)
    names = sorted(n for n, _ in toy.named_buffers())
    assert names == [
        "stack.0.running_mean",
        "stack.0.running_var",
        "stack.1.running_mean",
        "stack.1.running_var",
    ]


def test_train_eval_propagates(rng):
    toy = Toy(rng)
    assert all(m.training for m in toy.modules())
    toy.eval()
    assert not any(m.training for m in toy.modules())
    toy.train()
    assert toy.stack[1].training


def test_module_list_indexing(rng):
    ml = ModuleList([Linear(2, 2, rng) for _ in range(3)])
    assert len(ml) == 3
    assert ml[1] is list(ml)[1]
    ml.append(Linear(2, 2, rng))
    assert len(ml) == 4
    # appended child joins the parameter walk
    assert sum(1 for _ in ml.parameters()) == 8


def test_reassigning_parameter_replaces_registration(rng):
    toy = Toy(rng)
    toy.scale = Parameter(np.full(3, 2.0))
    found = dict(toy.named_parameters())
    np.testing.assert_array_equal(found["scale"].data, 2.0)
    assert sum(1 for n, _ in toy.named_parameters() if n == "scale") == 1


def test_kaiming_and_bias_bounds(rng):
    fan_in = 3 * 5 * 5
    w = kaiming_uniform(rng, (64, 3, 5, 5), fan_in)
    assert np.abs(w).max() <= math.sqrt(6.0 / fan_in)
    b = bias_uniform(rng, (64,), fan_in)
    assert np.abs(b).max() <= 1.0 / math.sqrt(fan_in)


def test_conv2d_module_forward(rng):
    conv = Conv2d(3, 4, 3, rng, stride=1, padding=1)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    out = conv(x)
    ref = oracles.conv2d_ref(x.data, conv.weight.data, conv.bias.data, 1, 1)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_conv2d_module_bias_flag(rng):
    conv = Conv2d(3, 4, 1, rng, bias=False)
    assert conv.bias is None
    assert [n for n, _ in conv.named_parameters()] == ["weight"]


def test_batchnorm_module_modes(rng):
    bn = BatchNorm2d(3)
    x = Tensor(rng.normal(size=(4, 3, 2, 2)))
    out_train = bn(x)
    ref = oracles.bn_train_ref(x.data, bn.gamma.data, bn.beta.data)
    np.testing.assert_allclose(out_train.data, ref, atol=1e-10)
    assert not np.allclose(bn.running_mean, 0.0)

    bn.eval()
    frozen_mean = bn.running_mean.copy()
    out_eval = bn(x)
    np.testing.assert_array_equal(bn.running_mean, frozen_mean)
    assert not np.allclose(out_eval.data, out_train.data)


def test_batchnorm_buffer_identity_survives_updates(rng):
    # forward must mutate the registered buffer in place, not rebind it
    bn = BatchNorm2d(2)
    buf = bn.running_mean
    bn(Tensor(rng.normal(size=(2, 2, 3, 3))))
    assert bn.running_mean is buf
    assert dict(bn.named_buffers())["running_mean"] is buf


def test_linear_module_forward(rng):
    fc = Linear(5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)))
    np.testing.assert_allclose(
        fc(x).data, oracles.linear_ref(x.data, fc.weight.data, fc.bias.data), atol=1e-12
    )


def test_conv_bn_leaky_composition(rng):
    block = ConvBNLeaky(2, 4, 3, rng, stride=2, padding=1)
    assert block.conv.bias is None
    x = Tensor(rng.uniform(-1, 1, (2, 2, 6, 6)))
    out = block(x)
    assert out.shape == (2, 4, 3, 3)
    pre = oracles.bn_train_ref(
        oracles.conv2d_ref(x.data, block.conv.weight.data, None, 2, 1),
        block.bn.gamma.data,
        block.bn.beta.data,
    )
    expected = np.where(pre > 0, pre, 0.1 * pre)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_seeded_init_is_reproducible():
    a = Conv2d(3, 8, 3, np.random.default_rng(7))
    b = Conv2d(3, 8, 3, np.random.default_rng(7))
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    np.testing.assert_array_equal(a.bias.data, b.bias.data)
