# -*- coding: utf-8 -*-
"""
field_network 测试：解析平均场、MeanFlowNet 的 JVP、NFE 计数与检查点
"""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from meanflowse.errors import MeanFlowError, PathError, ShapeMismatchError, UnsupportedFieldError
from meanflowse.models import FieldConfig
from meanflowse.tools.field_network import (
    CountingField,
    FieldQuery,
    MeanFlowNet,
    analytic_average_field,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from meanflowse.tools.tensor_core import Tensor
from meanflowse.tools.toy_data import make_affine_problem

SMALL = FieldConfig(width=24, n_blocks=2, embed_dim=8, seed=3)


def _random_head_net(dim: int = 6, seed: int = 0) -> MeanFlowNet:
    params = init_params(SMALL, dim)
    rng = np.random.default_rng(seed)
    params.assign({
        "head.weight": rng.normal(0.0, 0.3, (SMALL.width, dim)),
        "head.bias": rng.normal(0.0, 0.1, dim),
    })
    return MeanFlowNet(params)


def _query(n: int, dim: int, seed: int = 1) -> FieldQuery:
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 1.0, n)
    r = t * rng.uniform(0.0, 1.0, n)
    return FieldQuery(x=rng.normal(size=(n, dim)), r=r, t=t, y=rng.normal(size=(n, dim)))


# ==================== 解析参考场 ====================


# 测试用例 1：闭式轨迹与数值积分一致
@pytest.mark.parametrize("t,r", [(0.9, 0.1), (1.0, 0.0), (0.6, 0.55)])
def test_analytic_trajectory_matches_ode(t, r):
    problem = make_affine_problem(dim=3, seed=5, n=1)
    field = problem.field
    x_t = problem.x[0]

    sol = solve_ivp(
        lambda s, x: field.velocity(x.reshape(1, -1), s).reshape(-1),
        (t, r), x_t, rtol=1e-12, atol=1e-12, method="DOP853",
    )
    np.testing.assert_allclose(field.trajectory(problem.x, t, r)[0], sol.y[:, -1], atol=1e-9)


# 测试用例 2：对角 r = t 时平均速度等于瞬时速度
def test_analytic_diagonal_is_velocity():
    problem = make_affine_problem(dim=2, seed=1)
    t = np.linspace(0.0, 1.0, len(problem.x))
    np.testing.assert_allclose(
        problem.field.average(problem.x, t, t), problem.field.velocity(problem.x, t), atol=1e-14
    )


# 测试用例 3：引擎 JVP 与闭式全导数一致（级数区与递推区都覆盖）
def test_analytic_jvp_matches_closed_form():
    field = make_affine_problem(dim=2, seed=2).field
    n = 200
    rng = np.random.default_rng(0)
    t = rng.uniform(0.0, 1.0, n)
    r = t * rng.uniform(0.0, 1.0, n)
    x = rng.normal(size=(n, 2))
    q = FieldQuery(x=x, r=r, t=t, y=np.zeros_like(x))
    u, du = field.forward_with_jvp(q, field.velocity(x, t), 1.0)
    np.testing.assert_allclose(u, field.average(x, r, t), atol=1e-13)
    np.testing.assert_allclose(du, field.total_derivative(x, r, t), atol=1e-10)


def test_analytic_field_rejects_unsupported_specs():
    with pytest.raises(UnsupportedFieldError):
        analytic_average_field(np.array([[1.0, 0.2], [0.0, 1.0]]))
    with pytest.raises(UnsupportedFieldError):
        analytic_average_field(1.0, (0.0, 1.0, 2.0, 3.0))
    field = analytic_average_field(np.diag([0.5, -1.0]), (1.0, [0.0, 2.0]))
    np.testing.assert_array_equal(field.b[1], [0.0, 2.0])


# ==================== 网络 ====================


# 测试用例 4：零初始化输出头时场恒为零，形状为 (N, D)
def test_fresh_network_outputs_zero():
    net = MeanFlowNet(init_params(SMALL, 6))
    q = _query(5, 6)
    out = net.forward(q)
    assert out.shape == (5, 6)
    np.testing.assert_array_equal(out, 0.0)


# 测试用例 5：JVP 与中心差分一致（h=1e-3 → 1e-3，h=1e-4 → 1e-4）
@pytest.mark.parametrize("h,rtol", [(1e-3, 1e-3), (1e-4, 1e-4)])
def test_network_jvp_matches_finite_difference(h, rtol):
    net = _random_head_net()
    q = _query(100, 6)
    dx = np.random.default_rng(4).normal(size=q.x.shape)
    u, du = net.forward_with_jvp(q, dx, 1.0)
    fd = net.finite_difference_total_derivative(q, dx, 1.0, h)
    np.testing.assert_allclose(u, net.forward(q), rtol=1e-14, atol=1e-14)
    assert np.linalg.norm(du - fd) / np.linalg.norm(du) < rtol


# 测试用例 6：查询校验
def test_query_validation():
    net = MeanFlowNet(init_params(SMALL, 6))
    x = np.zeros((2, 6))
    with pytest.raises(PathError):
        net.forward(FieldQuery(x=x, r=0.8, t=0.5, y=x))
    with pytest.raises(ShapeMismatchError):
        net.forward(FieldQuery(x=x, r=0.1, t=0.5, y=np.zeros((2, 5))))
    with pytest.raises(ShapeMismatchError):
        net(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 5))))


# 测试用例 7：NFE 计数
def test_counting_field():
    counter = CountingField(_random_head_net())
    q = _query(3, 6)
    for _ in range(4):
        counter.forward(q)
    assert counter.count == 4
    counter.reset()
    assert counter.count == 0
    assert len(counter.parameters()) == len(init_params(SMALL, 6).weights)


# ==================== 检查点 ====================


# 测试用例 8：检查点读回，保留 dtype 标记与附加张量
def test_checkpoint_round_trip(tmp_path):
    net = _random_head_net()
    ema = net.params.copy()
    extra = {"adam_m/head.bias": np.arange(6.0)}
    path = save_checkpoint(tmp_path / "a.mfnn", net.params, ema=ema, extra={"step": 7}, tensors=extra)

    ckpt = load_checkpoint(path)
    assert ckpt.extra == {"step": 7}
    assert ckpt.params.config == SMALL
    for name, tensor in net.params.weights.items():
        np.testing.assert_array_equal(ckpt.params.weights[name].data, tensor.data)
        assert ckpt.params.weights[name].dtype == np.float64
    np.testing.assert_array_equal(ckpt.tensors["adam_m/head.bias"], np.arange(6.0))

    q = _query(4, 6)
    np.testing.assert_array_equal(MeanFlowNet(ckpt.ema).forward(q), net.forward(q))


def test_checkpoint_float32_export(tmp_path):
    net = _random_head_net()
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "b.mfnn", net.params, precision="float32"))
    assert ckpt.ema is None
    assert all(t.dtype == np.float32 for t in ckpt.params.weights.values())
    np.testing.assert_allclose(
        ckpt.params.weights["head.weight"].data, net.params.weights["head.weight"].data, rtol=1e-6
    )


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "c.mfnn").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(MeanFlowError):
        load_checkpoint(tmp_path / "c.mfnn")
    with pytest.raises(MeanFlowError):
        load_checkpoint(tmp_path / "missing.mfnn")
