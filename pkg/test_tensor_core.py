# -*- coding: utf-8 -*-
"""
tensor_core 测试：反向梯度、前向 JVP、截断梯度与原语白名单
"""

import numpy as np
import pytest

from meanflowse.errors import MeanFlowError, NonScalarLossError, ShapeMismatchError, UnsupportedPrimitiveError
from meanflowse.tools.tensor_core import (
    GradTape,
    Tensor,
    concat,
    cos,
    default_dtype,
    exp,
    get_default_dtype,
    grad,
    jvp,
    no_record,
    set_default_dtype,
    silu,
    sin,
    stop_gradient,
    tanh,
)


def _composite(x: Tensor, w: Tensor) -> Tensor:
    h = silu(x @ w) + tanh(x @ w) * sin(x @ w)
    return exp(-h * h) / (1.0 + h * h)


def _numeric_directional(f, x: np.ndarray, dx: np.ndarray, h: float = 1e-6) -> np.ndarray:
    return (f(Tensor(x + h * dx)).data - f(Tensor(x - h * dx)).data) / (2.0 * h)


# 测试用例 1：二次函数的梯度
def test_gradient_of_quadratic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    w = Tensor(rng.normal(size=(3, 2)))
    with GradTape() as tape:
        tape.watch(w)
        out = x @ w
        loss = (out * out).mean()
    (gw,) = tape.gradient(loss, [w])
    expected = 2.0 * x.T @ (x @ w.data) / out.size
    np.testing.assert_allclose(gw, expected, rtol=1e-12)


# 测试用例 2：广播的偏置梯度按广播轴求和
def test_bias_gradient_unbroadcasts():
    b = Tensor(np.zeros(4))
    x = np.ones((6, 4))
    with GradTape() as tape:
        tape.watch(b)
        loss = (x + b).sum()
    (gb,) = tape.gradient(loss, [b])
    np.testing.assert_array_equal(gb, np.full(4, 6.0))


# 测试用例 3：组合函数的 JVP 与数值方向导数一致
def test_jvp_matches_finite_difference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=(3, 3)) * 0.5)
    dx = rng.normal(size=x.shape)

    f = lambda v: _composite(v, w)
    out, tangent = jvp(f, x, dx)
    np.testing.assert_allclose(out.data, f(Tensor(x)).data, rtol=1e-14)
    np.testing.assert_allclose(tangent.data, _numeric_directional(f, x, dx), rtol=1e-6, atol=1e-9)


# 测试用例 4：多输入 JVP，未参与的切向量不影响结果
def test_jvp_multiple_inputs_and_concat():
    a = np.array([[1.0, 2.0]])
    b = np.array([[3.0]])
    out, tangent = jvp(lambda p, q: concat([p * p, q]), [a, b], [np.ones_like(a), np.zeros_like(b)])
    np.testing.assert_array_equal(out.data, [[1.0, 4.0, 3.0]])
    np.testing.assert_array_equal(tangent.data, [[2.0, 4.0, 0.0]])


# 测试用例 5：stop_gradient 不回传梯度，也不携带切向量
def test_stop_gradient_blocks_both_modes():
    w = Tensor(np.array([2.0]))
    with GradTape() as tape:
        tape.watch(w)
        loss = (w * stop_gradient(w)).sum()
    (gw,) = tape.gradient(loss, [w])
    np.testing.assert_array_equal(gw, [2.0])

    _, tangent = jvp(lambda v: v * stop_gradient(v), np.array([3.0]), np.array([1.0]))
    np.testing.assert_array_equal(tangent.data, [3.0])


# 测试用例 6：no_record 内的运算不进入记录带
def test_no_record_hides_operations():
    w = Tensor(np.array([1.5]))
    with GradTape() as tape:
        tape.watch(w)
        with no_record():
            frozen = w * w
        loss = (w * frozen.data).sum()
    (gw,) = tape.gradient(loss, [w])
    np.testing.assert_array_equal(gw, [2.25])


# 测试用例 7：错误路径
def test_unsupported_primitive_is_rejected():
    with pytest.raises(UnsupportedPrimitiveError):
        np.sqrt(Tensor(np.ones(3)))
    with pytest.raises(UnsupportedPrimitiveError):
        np.linalg.norm(Tensor(np.ones(3)))


def test_non_scalar_loss_is_rejected():
    w = Tensor(np.ones(3))
    with GradTape() as tape:
        tape.watch(w)
        out = w * 2.0
    with pytest.raises(NonScalarLossError):
        tape.gradient(out, [w])


def test_grad_without_tape_raises():
    w = Tensor(np.ones(2))
    with pytest.raises(MeanFlowError):
        grad((w * w).sum(), [w])


def test_jvp_tangent_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        jvp(lambda v: v * v, np.ones(3), np.ones(4))


# 测试用例 8：默认精度切换
def test_default_dtype_switch():
    try:
        set_default_dtype("float32")
        assert Tensor(1.0).dtype == np.float32
        assert get_default_dtype() == np.float32
    finally:
        set_default_dtype("float64")
    assert Tensor(1.0).dtype == np.float64
    with pytest.raises(ValueError):
        set_default_dtype("float16")


def test_default_dtype_context_restores_on_error():
    with pytest.raises(RuntimeError):
        with default_dtype("float32"):
            assert Tensor(1.0).dtype == np.float32
            raise RuntimeError("boom")
    assert get_default_dtype() == np.float64


# ==================== 前向 / 反向模式一致性 ====================

_W = np.random.default_rng(42).normal(size=(3, 2))

PRIMITIVE_CASES = {
    "tanh": lambda x: tanh(x),
    "silu": lambda x: silu(x),
    "sin_cos": lambda x: sin(x) * cos(x),
    "exp": lambda x: exp(0.5 * x),
    "div": lambda x: x / (2.0 + x * x),
    "neg_sub": lambda x: -x - 0.3 * x * x,
    "matmul": lambda x: x @ _W,
    "concat": lambda x: concat([x, tanh(x)], axis=1),
    "slice": lambda x: x[1:3, :2] * x[:2, 1:],
    "reshape_sum": lambda x: x.reshape(3, 4).sum(axis=0) + x.mean(),
}


# 测试用例 9：切向传播对切向量线性
@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_jvp_is_linear_in_tangent(name):
    f = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3))
    dx1, dx2 = rng.normal(size=x.shape), rng.normal(size=x.shape)
    a, b = 1.7, -0.4

    _, t1 = jvp(f, x, dx1)
    _, t2 = jvp(f, x, dx2)
    _, combined = jvp(f, x, a * dx1 + b * dx2)
    np.testing.assert_allclose(combined.data, a * t1.data + b * t2.data, rtol=1e-10, atol=1e-12)


# 测试用例 10：标量函数的 <∇f, dx> 等于 JVP
@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_reverse_and_forward_modes_agree(name):
    f = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 3))
    dx = rng.normal(size=x.shape)
    weights = rng.normal(size=f(Tensor(x)).shape)

    def scalar(v: Tensor) -> Tensor:
        return (f(v) * weights).sum()

    xt = Tensor(x)
    with GradTape() as tape:
        tape.watch(xt)
        loss = scalar(xt)
    (gx,) = tape.gradient(loss, [xt])

    _, tangent = jvp(scalar, x, dx)
    assert tangent.item() == pytest.approx(float(np.sum(gx * dx)), rel=1e-10, abs=1e-12)
