"""Autodiff engine checks: op gradients against finite differences, fused
kernels against loop oracles."""

import numpy as np
import pytest

from lipsynth import dsp
from lipsynth.engine import (
    LSTM,
    Conv1d,
    Dropout,
    LayerNorm,
    Linear,
    Tensor,
    absolute,
    clamp_min,
    concat,
    exp,
    flip,
    glu,
    leaky_relu,
    log,
    no_grad,
    ops,
    pad_constant,
    relu,
    sigmoid,
    silu,
    softmax,
    sqrt,
    tanh,
)

import oracles
from util import fd_check, rel_err

RNG = np.random.default_rng(1234)
TOL = 2e-6


def r(*shape):
    return RNG.standard_normal(shape)


def rpos(*shape):
    return RNG.random(shape) + 0.5


# ---- elementwise and shape ops -----------------------------------------------------


@pytest.mark.parametrize(
    "fn,arrays",
    [
        (lambda a, b: ((a + b) * (a - b)).sum(), [r(3, 4), r(3, 4)]),
        (lambda a, b: (a * b).mean(), [r(2, 5), r(5)]),  # broadcast
        (lambda a, b: (a / b).sum(), [r(4, 3), rpos(4, 3)]),
        (lambda a: (a**3.0).sum(), [r(6)]),
        (lambda a: exp(a).sum(), [r(4)]),
        (lambda a: log(a).sum(), [rpos(5)]),
        (lambda a: sqrt(a).sum(), [rpos(5)]),
        (lambda a: tanh(a).sum(), [r(7)]),
        (lambda a: sigmoid(a).sum(), [r(7)]),
        (lambda a: silu(a).sum(), [r(7)]),
        (lambda a: absolute(a).sum(), [r(9) + 3.0]),
        (lambda a: clamp_min(a, 0.5).sum(), [rpos(9) * 4.0]),
        (lambda a: relu(a).sum(), [r(9) + 2.0]),
        (lambda a: leaky_relu(a, 0.2).sum(), [r(9) + 2.0]),
        (lambda a: (softmax(a, -1) * softmax(a, -1)).sum(), [r(3, 6)]),
        (lambda a: glu(a, 1).sum(), [r(2, 8, 3)]),
        (lambda a: a.reshape(6, 2).sum(axis=0).mean(), [r(3, 4)]),
        (lambda a: a.transpose(1, 0, 2).sum(), [r(2, 3, 4)]),
        (lambda a: a.swapaxes(0, 2).mean(), [r(2, 3, 4)]),
        (lambda a: flip(a, 1).mean(axis=(0, 1)).sum(), [r(3, 5)]),
        (lambda a: (a[1:, ::2] ** 2.0).sum(), [r(4, 6)]),
        (lambda a: pad_constant(a, ((0, 0), (2, 3))).sum(), [r(2, 4)]),
        (lambda a, b: concat([a, b], axis=1).mean(), [r(2, 3), r(2, 5)]),
        (lambda a, b: (a @ b).sum(), [r(3, 4), r(4, 5)]),
        (lambda a, b: (a @ b).sum(), [r(2, 3, 4, 5), r(5, 6)]),  # batched/broadcast
        (lambda a: a.sum(axis=1, keepdims=True).mean(), [r(3, 4, 2)]),
        (lambda a: a.mean(axis=(0, 2)).sum(), [r(3, 4, 2)]),
    ],
)
def test_op_gradients(fn, arrays):
    assert fd_check(fn, arrays) < TOL


def test_graph_reuse_accumulates():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1
    y.sum().backward()
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_no_grad_blocks_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y._vjp is None and not y.requires_grad


def test_backward_accumulates_until_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    assert np.allclose(x.grad, 6.0)


# ---- convolutions vs loop oracles --------------------------------------------------


@pytest.mark.parametrize(
    "cin,cout,k,stride,pad,dil,groups",
    [
        (3, 4, 3, 1, 1, 1, 1),
        (4, 6, 5, 2, 2, 1, 2),
        (3, 3, 3, 1, 3, 3, 1),
        (8, 8, 7, 1, 3, 1, 8),  # depthwise
        (4, 4, 15, 4, 7, 1, 1),
    ],
)
def test_conv1d_matches_loops_and_grads(cin, cout, k, stride, pad, dil, groups):
    x = r(2, cin, 19)
    w = r(cout, cin // groups, k)
    b = r(cout)
    ref = oracles.conv1d_loops(x, w, b, stride, pad, dil, groups)
    got = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil, groups)
    assert rel_err(got.data, ref) < 1e-12

    def fn(xt, wt, bt):
        return (ops.conv1d(xt, wt, bt, stride, pad, dil, groups) ** 2.0).sum()

    assert fd_check(fn, [x, w, b]) < TOL


@pytest.mark.parametrize(
    "stride,k,pad",
    [(4, 8, 2), (5, 11, 3), (3, 7, 2), (1, 7, 3)],
)
def test_conv_transpose1d_matches_loops_and_grads(stride, k, pad):
    x = r(2, 3, 6)
    w = r(3, 4, k)
    b = r(4)
    ref = oracles.conv_transpose1d_loops(x, w, b, stride, pad)
    got = ops.conv_transpose1d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    assert got.data.shape == ref.shape
    assert rel_err(got.data, ref) < 1e-12

    def fn(xt, wt, bt):
        return (ops.conv_transpose1d(xt, wt, bt, stride, pad) ** 2.0).sum()

    assert fd_check(fn, [x, w, b]) < TOL


def test_conv_transpose1d_exact_upsample_rule():
    # even factor: k=2r, p=r//2; odd factor: k=2r+1, p=(r+1)//2 -> L*r exactly
    for rfac in (2, 3, 4, 5):
        k = 2 * rfac if rfac % 2 == 0 else 2 * rfac + 1
        p = rfac // 2 if rfac % 2 == 0 else (rfac + 1) // 2
        x = Tensor(r(1, 2, 7))
        y = ops.conv_transpose1d(x, Tensor(r(2, 2, k)), None, rfac, p)
        assert y.shape[-1] == 7 * rfac


def test_conv2d_matches_loops_and_grads():
    x = r(2, 3, 8, 9)
    w = r(4, 3, 3, 3)
    b = r(4)
    ref = oracles.conv2d_loops(x, w, b, (2, 2), (1, 1))
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), (2, 2), (1, 1))
    assert rel_err(got.data, ref) < 1e-12

    def fn(xt, wt, bt):
        return (ops.conv2d(xt, wt, bt, (2, 2), (1, 1)) ** 2.0).sum()

    assert fd_check(fn, [x, w, b]) < TOL


def test_conv3d_matches_loops_and_grads():
    x = r(1, 2, 5, 6, 6)
    w = r(3, 2, 3, 3, 3)
    b = r(3)
    ref = oracles.conv3d_loops(x, w, b, (1, 2, 2), (1, 1, 1))
    got = ops.conv3d(Tensor(x), Tensor(w), Tensor(b), (1, 2, 2), (1, 1, 1))
    assert rel_err(got.data, ref) < 1e-12

    def fn(xt, wt, bt):
        return (ops.conv3d(xt, wt, bt, (1, 2, 2), (1, 1, 1)) ** 2.0).sum()

    assert fd_check(fn, [x, w, b]) < TOL


# ---- pooling -----------------------------------------------------------------------


def test_avg_pool1d_grads():
    x = r(2, 3, 12)

    def fn(xt):
        return (ops.avg_pool1d(xt, 4, 2, 1) ** 2.0).sum()

    y = ops.avg_pool1d(Tensor(x), 4, 2, 1)
    assert y.shape == (2, 3, (12 + 2 - 4) // 2 + 1)
    assert fd_check(fn, [x]) < TOL


def test_max_pool2d_matches_naive_and_grads():
    x = r(2, 2, 7, 8)
    y = ops.max_pool2d(Tensor(x), (3, 3), (2, 2), (1, 1))
    # naive forward
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    for bi in range(2):
        for c in range(2):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    win = xp[bi, c, i * 2 : i * 2 + 3, j * 2 : j * 2 + 3]
                    assert y.data[bi, c, i, j] == win.max()

    def fn(xt):
        return (ops.max_pool2d(xt, (3, 3), (2, 2), (1, 1)) ** 2.0).sum()

    assert fd_check(fn, [x]) < TOL


# ---- recurrent ----------------------------------------------------------------------


def test_lstm_seq_matches_loops_and_grads():
    x = r(2, 5, 3)
    w_ih = r(16, 3) * 0.4
    w_hh = r(16, 4) * 0.4
    b = r(16) * 0.1
    ref = oracles.lstm_loops(x, w_ih, w_hh, b)
    got = ops.lstm_seq(Tensor(x), Tensor(w_ih), Tensor(w_hh), Tensor(b))
    assert rel_err(got.data, ref) < 1e-10

    def fn(xt, wi, wh, bt):
        return (ops.lstm_seq(xt, wi, wh, bt) ** 2.0).sum()

    assert fd_check(fn, [x, w_ih, w_hh, b]) < 5e-6


def test_bilstm_module_grads():
    rng = np.random.default_rng(7)
    m = LSTM(3, 4, rng, bidirectional=True, num_layers=2).astype(np.float64)
    x = r(2, 6, 3)

    def fn(xt):
        return (m(xt) ** 2.0).sum()

    assert fd_check(fn, [x]) < 5e-6
    # parameter grads against numeric, a few sampled weights
    m.zero_grad()
    xt = Tensor(x, requires_grad=True)
    loss = (m(xt) ** 2.0).sum()
    loss.backward()
    w = m.weight_ih_l0
    h = 1e-6
    for _ in range(8):
        idx = tuple(RNG.integers(0, s) for s in w.data.shape)
        orig = w.data[idx]
        w.data[idx] = orig + h
        fp = float((m(Tensor(x)) ** 2.0).sum().data)
        w.data[idx] = orig - h
        fm = float((m(Tensor(x)) ** 2.0).sum().data)
        w.data[idx] = orig
        assert abs(w.grad[idx] - (fp - fm) / (2 * h)) < 1e-4 * max(1.0, abs(w.grad[idx]))


# ---- batch norm op -------------------------------------------------------------------


def test_batch_norm_train_grads():
    x = r(4, 3, 5)
    w = rpos(3)
    b = r(3)

    def fused(xt, wt, bt):
        mean = xt.data.mean(axis=(0, 2))
        var = xt.data.var(axis=(0, 2))
        return ops.batch_norm_train(xt, wt, bt, mean, var, 1e-5)

    def compose(xt, wt, bt):
        mu = xt.mean(axis=(0, 2), keepdims=True)
        xc = xt - mu
        var = (xc * xc).mean(axis=(0, 2), keepdims=True)
        return xc / (var + 1e-5) ** 0.5 * wt.reshape(1, -1, 1) + bt.reshape(1, -1, 1)

    # fused backward equals the composition of fd-verified primitives
    t1 = [Tensor(a.copy(), requires_grad=True) for a in (x, w, b)]
    (fused(*t1) ** 2.0).sum().backward()
    t2 = [Tensor(a.copy(), requires_grad=True) for a in (x, w, b)]
    (compose(*t2) ** 2.0).sum().backward()
    for a, b_ in zip(t1, t2):
        assert rel_err(a.grad, b_.grad) < 1e-9
    # and numeric agreement at a step size the normalization tolerates
    assert fd_check(lambda *ts: (fused(*ts) ** 2.0).sum(), [x, w, b], h=1e-5) < 1e-4


# ---- STFT magnitude ------------------------------------------------------------------


def test_stft_magnitude_matches_dsp_and_grads():
    cfg = dsp.StftConfig(fft_size=16, hop_size=5, win_size=12)
    x = r(2, 48)
    mag = ops.stft_magnitude(Tensor(x), cfg)
    for bi in range(2):
        ref = np.abs(dsp.stft(x[bi], cfg))
        assert rel_err(mag.data[bi], ref) < 1e-12
    rw = RNG.random(mag.shape)

    def fn(xt):
        return (ops.stft_magnitude(xt, cfg) * Tensor(rw)).sum()

    assert fd_check(fn, [x]) < 5e-6


# ---- layers --------------------------------------------------------------------------


def test_linear_and_layernorm_grads():
    rng = np.random.default_rng(3)
    lin = Linear(4, 3, rng).astype(np.float64)
    ln = LayerNorm(3).astype(np.float64)
    x = r(5, 4)

    def fn(xt):
        return (ln(lin(xt)) ** 2.0).sum()

    assert fd_check(fn, [x]) < TOL


def test_weight_norm_conv_matches_plain_at_init_and_grads():
    rng = np.random.default_rng(5)
    c_wn = Conv1d(3, 4, 5, np.random.default_rng(11), padding=2, weight_norm=True)
    # at init, effective weight equals v (g = ||v||)
    w_eff = c_wn.effective_weight().data
    assert rel_err(w_eff, c_wn.weight_v.data) < 1e-6
    c_wn.astype(np.float64)
    x = r(2, 3, 10)

    def fn(xt):
        return (c_wn(xt) ** 2.0).sum()

    assert fd_check(fn, [x]) < TOL
    xt = Tensor(x, requires_grad=True)
    (c_wn(xt) ** 2.0).sum().backward()
    assert c_wn.weight_g.grad is not None and c_wn.weight_v.grad is not None


def test_dropout_train_eval():
    d = Dropout(0.5)
    d.set_rng(np.random.default_rng(0))
    x = Tensor(np.ones((4, 1000)), requires_grad=True)
    y = d(x)
    kept = y.data != 0
    assert 0.4 < kept.mean() < 0.6
    assert np.allclose(y.data[kept], 2.0)  # inverted scaling
    d.eval()
    assert np.array_equal(d(x).data, x.data)


def test_module_state_roundtrip():
    rng = np.random.default_rng(9)
    m = LSTM(3, 4, rng)
    state = {k: v.copy() for k, v in m.state_arrays().items()}
    m2 = LSTM(3, 4, np.random.default_rng(10))
    m2.load_state_arrays(state)
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
