import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drm3d.errors import ConfigError, ShapeError, UsageError
from drm3d.nn import (Linear, Module, MultiHeadAttention, Parameter, Tensor, TransformerBlock, adam_step,
                      clip_grad_norm, cosine_lr, gelu, layer_norm, linear, load_checkpoint, multi_head_attention,
                      save_checkpoint, softmax)
from drm3d.nn import tensor as T
from drm3d.nn.gradcheck import check_gradients, numeric_gradient


def test_linear_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x.data)


def test_linear_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(5, 2\)"):
        linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


def test_softmax_constant_and_rows_sum_to_one():
    np.testing.assert_allclose(softmax(Tensor(np.full(4, 3.7))).data, [0.25] * 4, atol=0)
    x = np.random.default_rng(1).normal(scale=30, size=(5, 7))
    s = softmax(Tensor(x)).data
    assert np.max(np.abs(s.sum(-1) - 1)) <= 1e-12


def test_softmax_mask_excludes_positions():
    s = softmax(Tensor(np.array([[1.0, 2.0, 3.0]])), mask=np.array([[True, False, True]])).data
    assert s[0, 1] == 0.0
    np.testing.assert_allclose(s[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())


def test_layer_norm_statistics():
    x = np.random.default_rng(2).normal(3.0, 5.0, size=(6, 16))
    y = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=0.0).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, atol=1e-12)


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 9)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(gelu(Tensor(x)).data, ref, atol=1e-15)


def test_backward_linear_outer_product():
    W = Parameter(np.random.default_rng(3).normal(size=(3, 2)))
    x = np.array([[1.0, 2.0, 3.0]])
    T.tsum(T.matmul(Tensor(x), W)).backward()
    np.testing.assert_allclose(W.grad, np.outer(x[0], np.ones(2)))


def test_backward_usage_errors():
    W = Parameter(np.ones(3))
    loss = T.tsum(T.mul(W, W))
    loss.backward()
    with pytest.raises(UsageError):
        loss.backward()
    with pytest.raises(UsageError):
        T.mul(Parameter(np.ones(3)), 2.0).backward()


def test_disconnected_parameter_gets_zero_gradient():
    class M(Module):
        def __init__(self):
            self.a = Parameter(np.ones(2))
            self.b = Parameter(np.ones(2))
    m = M()
    m.zero_grad()
    T.tsum(T.mul(m.a, 3.0)).backward()
    np.testing.assert_array_equal(m.b.grad, 0.0)
    np.testing.assert_array_equal(m.a.grad, 3.0)


OPS = {
    "add": lambda a, b: T.add(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b, (1, 0))),
    "softmax": lambda a, b: T.mul(softmax(a), b),
    "gelu": lambda a, b: T.mul(gelu(a), b),
    "layer_norm": lambda a, b: layer_norm(a, b[0], b[1]),
    "concat_getitem": lambda a, b: T.getitem(T.concat([a, b], 0), (slice(1, 5), slice(None))),
    "stack_square": lambda a, b: T.square(T.stack([a, b], 1)),
    "mean_reshape": lambda a, b: T.tmean(T.reshape(T.mul(a, b), (2, -1)), axis=1),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients(op):
    rng = np.random.default_rng(4)
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.normal(size=(3, 4)))
    w = rng.normal(size=OPS[op](a, b).shape)

    def loss(backward):
        out = T.tsum(T.mul(OPS[op](a, b), w))
        if backward:
            out.backward()
        return out.item()

    errs = check_gradients([("a", a), ("b", b)], loss)
    assert max(errs.values()) <= 1e-7, errs


def dense_attention(q, k, v):
    s = q @ k.T / math.sqrt(q.shape[-1])
    s = np.exp(s - s.max(-1, keepdims=True))
    return (s / s.sum(-1, keepdims=True)) @ v


def test_attention_matches_dense_oracle():
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(1, 3, 4)) for _ in range(3))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 1).data
    assert np.max(np.abs(out[0] - dense_attention(q[0], k[0], v[0]))) <= 1e-12


def test_attention_two_heads_matches_dense_oracle():
    rng = np.random.default_rng(6)
    q, k, v = (rng.normal(size=(2, 5, 8)) for _ in range(3))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 2).data
    for b in range(2):
        ref = np.concatenate([dense_attention(q[b, :, s], k[b, :, s], v[b, :, s])
                              for s in (slice(0, 4), slice(4, 8))], axis=-1)
        assert np.max(np.abs(out[b] - ref)) <= 1e-12


def test_attention_single_key_and_identical_keys():
    rng = np.random.default_rng(7)
    mha = MultiHeadAttention(4, 2, rng, std=0.5)
    q = Tensor(rng.normal(size=(3, 4)))
    kv = Tensor(rng.normal(size=(1, 4)))
    out = mha(q, kv, kv).data
    ref = linear(mha.v(kv), mha.o.W, mha.o.b).data
    np.testing.assert_allclose(out, np.repeat(ref, 3, axis=0), atol=1e-12)
    # identical keys: uniform weights, output is the projected mean of the values
    keys = Tensor(np.repeat(rng.normal(size=(1, 4)), 5, axis=0))
    vals = Tensor(rng.normal(size=(5, 4)))
    out = mha(q, keys, vals).data
    ref = linear(Tensor(mha.v(vals).data.mean(0, keepdims=True)), mha.o.W, mha.o.b).data
    np.testing.assert_allclose(out, np.repeat(ref, 3, axis=0), atol=1e-12)


def test_attention_indivisible_heads():
    with pytest.raises(ConfigError):
        MultiHeadAttention(6, 4, np.random.default_rng(0))


def test_masked_keys_are_ignored():
    rng = np.random.default_rng(8)
    blk = TransformerBlock(8, 2, 16, rng, std=0.3)
    x = rng.normal(size=(1, 5, 8))
    mask = np.array([[True, True, True, False, False]])
    a = blk(Tensor(x), mask).data
    x2 = x.copy()
    x2[0, 3:] = rng.normal(size=(2, 8)) * 100
    b = blk(Tensor(x2), mask).data
    np.testing.assert_allclose(a[0, :3], b[0, :3], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_attention_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    blk = TransformerBlock(8, 2, 16, np.random.default_rng(0), std=0.3)
    x = rng.normal(size=(1, 6, 8))
    perm = rng.permutation(6)
    a = blk(Tensor(x)).data
    b = blk(Tensor(x[:, perm])).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_encoder_gradient_check():
    rng = np.random.default_rng(9)
    blk = TransformerBlock(8, 2, 32, rng, std=0.5)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    w = rng.normal(size=(1, 3, 8))

    def loss(backward):
        out = T.tsum(T.mul(blk(x), w))
        if backward:
            out.backward()
        return out.item()

    errs = check_gradients(blk.named_parameters(), loss)
    assert max(errs.values()) <= 1e-4, errs


def test_adam_fixed_point_and_first_step():
    p = Parameter(np.array([1.5, -2.0]))
    p.grad = np.zeros(2)
    adam_step([p], 0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    q = Parameter(np.array(0.7))
    q.grad = np.array(1.0)
    adam_step([q], 0.01, eps=0.0)
    assert q.data == pytest.approx(0.69, abs=1e-15)


def test_adam_requires_gradients_and_is_deterministic():
    with pytest.raises(UsageError):
        adam_step([Parameter(np.ones(2))], 0.1)
    runs = []
    for _ in range(2):
        p = Parameter(np.ones(3))
        for i in range(5):
            p.grad = np.array([1.0, -2.0, 0.5]) * (i + 1)
            adam_step([p], 0.01)
        runs.append(p.data.copy())
    assert runs[0].tobytes() == runs[1].tobytes()


def test_clip_and_cosine():
    p = Parameter(np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    lin = Linear(3, 2, rng)
    for p in lin.parameters():
        p.m[...] = rng.normal(size=p.shape)
        p.v[...] = rng.random(p.shape)
        p.step = 17
    save_checkpoint(tmp_path, lin.named_parameters(), {"note": "x"})
    other = Linear(3, 2, np.random.default_rng(99))
    assert load_checkpoint(tmp_path, other.named_parameters()) == {"note": "x"}
    for a, b in zip(lin.parameters(), other.parameters()):
        for x, y in ((a.data, b.data), (a.m, b.m), (a.v, b.v)):
            assert x.tobytes() == y.tobytes()
        assert b.step == 17
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path, Linear(3, 4, rng).named_parameters())


def test_numeric_gradient_quadratic():
    p = Parameter(np.array([1.0, -2.0]))
    g = numeric_gradient(p, lambda: float((p.data ** 2).sum()))
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)
