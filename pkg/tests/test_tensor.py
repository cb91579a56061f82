import zlib

import numpy as np
import pytest

from flowkd import tensor as T
from flowkd.gradcheck import gradient_check
from flowkd.nn import BatchNorm, Conv2d, Dense, LayerGraph, build_model
from flowkd.optim import Adam, OptimizerConfig, SGD, adam_step
from flowkd.tensor import NonFiniteError, Tensor, no_grad


def param(rng, *shape, low=None):
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, 2.0, shape)
    return Tensor(data, requires_grad=True)


# -- forward examples ----------------------------------------------------------

def test_identity_graph():
    x = np.arange(6.0).reshape(2, 3)
    g = LayerGraph((3,), [], [])
    assert np.array_equal(g.forward(x).data, x)


def test_zero_dense_gives_zero():
    d = Dense(5, 3)
    d.weight.data[:] = 0.0
    d.bias.data[:] = 0.0
    out = d.forward(Tensor(np.random.default_rng(0).standard_normal((4, 5))), train=False)
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_one_by_one_conv_weight_two():
    conv = Conv2d(1, 1, 1)
    conv.weight.data[:] = 2.0
    conv.bias.data[:] = 0.0
    out = conv.forward(Tensor(np.ones((1, 1, 4, 4))), train=False)
    assert np.array_equal(out.data, np.full((1, 1, 4, 4), 2.0))


def test_conv2d_matches_loops():
    rng = np.random.default_rng(1)
    for stride, pad, k in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)]:
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        got = T.conv2d(x, w, b, stride=stride, padding=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - k) // stride + 1
        wo = (6 + 2 * pad - k) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for f in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                        ref[n, f, i, j] = (patch * w[f]).sum() + b[f]
        np.testing.assert_allclose(got, ref, atol=1e-12)


def test_max_pool_picks_block_max():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(T.max_pool2d(x).data[0, 0], [[5, 7], [13, 15]])


# -- backward examples ---------------------------------------------------------

def test_sum_grad_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, [1, 1, 1])


def test_sum_of_squares_grad():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(x * x).backward()
    assert np.array_equal(x.grad, [2, 4, 6])


def test_grads_accumulate_until_zeroed():
    x = Tensor([1.0, -2.0], requires_grad=True)
    T.tsum(x * 3.0).backward()
    T.tsum(x * 3.0).backward()
    assert np.array_equal(x.grad, [6, 6])
    x.zero_grad()
    assert x.grad is None


def test_backward_zero_backward_identical():
    rng = np.random.default_rng(3)
    model = build_model("cnn1-l", (3, 8, 8), 3, rng=rng)
    x = rng.standard_normal((4, 3, 8, 8))

    def grads():
        model.zero_grad()
        _, logits = model.run(x, train=False)
        T.tsum(logits * logits).backward()
        return {k: p.grad.copy() for k, p in model.parameters().items()}

    a, b = grads(), grads()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_forward_deterministic():
    rng = np.random.default_rng(4)
    model = build_model("cnn1", (3, 8, 8), rng=rng)
    x = rng.standard_normal((5, 3, 8, 8))
    r1 = model.representations(x)
    r2 = model.representations(x)
    assert all(np.array_equal(a, b) for a, b in zip(r1, r2))


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(Exception):
        (x * 2.0).backward()


def test_relu_subgradient_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    T.tsum(T.relu(x)).backward()
    assert np.array_equal(x.grad, [0, 0, 1])


def test_broadcast_bias_grad():
    rng = np.random.default_rng(5)
    a = param(rng, 4, 3)
    b = param(rng, 3)
    T.tsum((a + b) * (a + b)).backward()
    np.testing.assert_allclose(b.grad, (2 * (a.data + b.data)).sum(axis=0))


def test_float32_mode():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float32)
    try:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.tsum(x * x)
        y.backward()
        assert x.data.dtype == np.float32 and x.grad.dtype == np.float32
    finally:
        T.set_default_dtype(prev)


# -- finite-difference checks per op --------------------------------------------

OPS = {
    "add": lambda p: T.tsum((p[0] + p[1]) ** 2),
    "sub_broadcast": lambda p: T.tsum((p[0] - p[2]) ** 2),
    "mul": lambda p: T.tsum(p[0] * p[1] * p[0]),
    "div": lambda p: T.tsum(p[0] / (p[1] * p[1] + 1.0)),
    "exp": lambda p: T.tsum(T.exp(p[0] * 0.5)),
    "log": lambda p: T.tsum(T.log(p[1] * p[1] + 0.5)),
    "sqrt": lambda p: T.tsum(T.sqrt(p[1] * p[1] + 0.1)),
    "power": lambda p: T.tsum(T.power(p[1] * p[1] + 0.2, 1.5)),
    "matmul": lambda p: T.tsum((p[0] @ T.transpose(p[1])) ** 2),
    "mean_axis": lambda p: T.tsum(T.tmean(p[0] * p[1], axis=1) ** 2),
    "log_softmax": lambda p: T.tsum(T.log_softmax(p[0]) * p[1]),
    "reshape": lambda p: T.tsum(T.reshape(p[0], (3, 4)) @ T.reshape(p[1], (4, 3))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [param(rng, 4, 3), param(rng, 4, 3), param(rng, 3)]
    rep = gradient_check(lambda: OPS[name](params), params)
    assert rep.passed, str(rep)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1)])
def test_conv_gradients(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    x, w, b = param(rng, 2, 2, 5, 5), param(rng, 3, 2, k, k), param(rng, 3)
    rep = gradient_check(lambda: T.tsum(T.conv2d(x, w, b, stride, pad) ** 2), [x, w, b])
    assert rep.passed, str(rep)


def test_pool_and_gap_gradients():
    rng = np.random.default_rng(7)
    x = param(rng, 2, 2, 4, 4)
    rep = gradient_check(lambda: T.tsum(T.max_pool2d(x) ** 2) + T.tsum(T.global_avg_pool(x) ** 3), [x])
    assert rep.passed, str(rep)


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    rng = np.random.default_rng(8)
    x, gamma, beta = param(rng, 4, 3, 3, 3), param(rng, 3), param(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    target = rng.standard_normal((4, 3, 3, 3))

    def loss():
        # fresh buffers each call keep the function pure for the checker
        return T.tsum(T.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), train) * target)

    rep = gradient_check(loss, [x, gamma, beta])
    assert rep.passed, str(rep)


def test_batchnorm_running_stats():
    bn = BatchNorm(2)
    x = np.random.default_rng(9).standard_normal((10, 2, 3, 3))
    bn.forward(Tensor(x), train=True)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * mean)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var)


def test_whole_model_gradient():
    rng = np.random.default_rng(10)
    model = build_model("cnn1-l", (3, 8, 8), 3, rng=rng)
    x = rng.standard_normal((4, 3, 8, 8))
    labels = np.array([0, 1, 2, 1])
    from flowkd.distill import cross_entropy

    rep = gradient_check(lambda: cross_entropy(model.run(x, train=False)[1], labels),
                         model.parameters(), max_entries=6)
    assert rep.passed, str(rep)


# -- gradient checker ----------------------------------------------------------

def test_gradcheck_quadratic_exact():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    rep = gradient_check(lambda: T.tsum(x * x * 3.0), [x])
    assert rep.worst < 1e-8


def test_gradcheck_relu_kink_excluded():
    far = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    assert gradient_check(lambda: T.tsum(T.relu(far)), [far]).passed
    at0 = Tensor(np.array([0.0]), requires_grad=True)
    rep = gradient_check(lambda: T.tsum(T.relu(at0)), [at0])
    assert rep.excluded["param0"] == 1 and rep.passed


def test_gradcheck_rejects_float32():
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float32)
    try:
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(RuntimeError):
            gradient_check(lambda: T.tsum(x * x), [x])
    finally:
        T.set_default_dtype(prev)


# -- optimizers ----------------------------------------------------------------

def test_adam_first_step():
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adam_step(OptimizerConfig(learning_rate=1e-3), {"p": p})
    # m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps)
    assert p.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_grad_leaves_param():
    p = Tensor(np.array([0.7, -0.2]), requires_grad=True)
    p.grad = np.zeros(2)
    Adam({"p": p}).step()
    assert np.array_equal(p.data, [0.7, -0.2])


def test_adam_symmetric_params():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"a": a, "b": b})
    for g in ([0.3, -0.1], [0.2, 0.5]):
        a.grad, b.grad = np.array(g), np.array(g)
        opt.step()
    assert np.array_equal(a.data, b.data)


def test_adam_matches_hand_two_steps():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, OptimizerConfig(learning_rate=0.1))
    value, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -0.25], start=1):
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        value -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p.data[0] == pytest.approx(value, abs=1e-15)


def test_step_without_grads_fails():
    p = Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(RuntimeError):
        Adam({"p": p}).step()
    with pytest.raises(RuntimeError):
        SGD({"p": p}).step()


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=0)
    with pytest.raises(ValueError):
        OptimizerConfig(kind="rmsprop")
