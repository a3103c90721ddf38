# -*- coding: utf-8 -*-
"""
sampler 测试：时间网格、位移采样、欧拉基线与 RTF 测量
"""

import numpy as np
import pytest
from pydantic import ValidationError

from meanflowse.errors import ScheduleError
from meanflowse.models import FieldConfig, PathConfig, SamplerConfig
from meanflowse.pipeline import check_euler_order, check_exact_field_invariance
from meanflowse.tools.conditional_path import reverse_init
from meanflowse.tools.field_network import AverageField, MeanFlowNet, init_params
from meanflowse.tools.sampler import (
    EnhanceResult,
    SamplerSchedule,
    displace_step,
    enhance,
    enhance_multi_step,
    enhance_single_step,
    enhance_waveform,
    euler_fm,
    instantaneous_view,
    measure_rtf,
)
from meanflowse.tools.signal_frontend import Waveform
from meanflowse.tools.tensor_core import Tensor
from meanflowse.tools.toy_data import make_affine_problem


def _net(dim: int, seed: int = 0) -> MeanFlowNet:
    params = init_params(FieldConfig(width=16, n_blocks=1, embed_dim=8), dim)
    rng = np.random.default_rng(seed)
    params.assign({"head.weight": rng.normal(0.0, 0.3, (16, dim)), "head.bias": rng.normal(0.0, 0.1, dim)})
    return MeanFlowNet(params)


# ==================== 时间网格 ====================


# 测试用例 1：均匀网格与校验
def test_schedule_construction():
    s = SamplerSchedule.displacement(3)
    np.testing.assert_allclose(s.grid, [1.0, 2 / 3, 1 / 3, 0.0])
    assert s.nfe == 3 and s.t_rev == 1.0 and s.t_eps == 0.0
    assert np.all(s.steps > 0)

    e = SamplerSchedule.euler(4)
    np.testing.assert_array_equal(e.grid, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert np.all(e.steps == 0.25)


@pytest.mark.parametrize(
    "mode,grid",
    [
        ("displacement_mf", [1.0]),
        ("displacement_mf", [0.5, 0.5, 0.0]),
        ("displacement_mf", [1.2, 0.0]),
        ("euler_fm", [0.0, 0.6, 0.4, 1.0]),
        ("euler_fm", [0.1, 1.0]),
        ("bogus", [1.0, 0.0]),
    ],
)
def test_schedule_rejects_bad_grids(mode, grid):
    with pytest.raises(ScheduleError):
        SamplerSchedule(mode, grid)


def test_schedule_rejects_bad_counts():
    with pytest.raises(ScheduleError):
        SamplerSchedule.displacement(0)
    with pytest.raises(ScheduleError):
        SamplerSchedule.displacement(2, t_rev=0.3, t_eps=0.5)
    with pytest.raises(ScheduleError):
        SamplerSchedule.euler(0)
    with pytest.raises(ScheduleError):
        EnhanceResult(enhanced=np.zeros(1), nfe=0, wall_seconds=0.0)


# ==================== 位移采样 ====================


# 测试用例 2：真实平均场下一次位移等于闭式轨迹
def test_displace_step_follows_exact_trajectory():
    problem = make_affine_problem(dim=3, seed=4)
    out = displace_step(problem.x, 0.9, 0.2, problem.y, problem.field)
    np.testing.assert_allclose(out, problem.field.trajectory(problem.x, 0.9, 0.2), atol=1e-12)

    with pytest.raises(ScheduleError):
        displace_step(problem.x, 0.2, 0.2, problem.y, problem.field)


# 测试用例 3：NFE 由实际前向次数决定
@pytest.mark.parametrize("nfe", [1, 2, 5])
def test_multi_step_counts_forward_passes(nfe):
    rng = np.random.default_rng(0)
    y = rng.normal(size=(7, 6))
    result = enhance_multi_step(y, _net(6), SamplerSchedule.displacement(nfe), rng=rng)
    assert result.nfe == nfe
    assert result.enhanced.shape == y.shape
    assert result.rtf is None
    assert result.wall_seconds > 0


def test_multi_step_rejects_euler_grid():
    y = np.zeros((2, 6))
    with pytest.raises(ScheduleError):
        enhance_multi_step(y, _net(6), SamplerSchedule.euler(2), rng=np.random.default_rng(0))


# 测试用例 4：真实平均场下结果与步数无关
def test_exact_field_is_step_invariant():
    error, _ = check_exact_field_invariance()
    assert error < 1e-8


# 测试用例 5：nfe=1 的统一入口与单步、单段多步逐位一致
def test_single_step_paths_agree():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(5, 6))
    z = rng.normal(size=y.shape)
    net = _net(6, seed=1)
    cfg = PathConfig(t_rev=0.9, t_eps=0.05)

    single = enhance_single_step(y, net, cfg, z=z).enhanced
    multi = enhance_multi_step(y, net, SamplerSchedule.displacement(1, 0.9, 0.05), cfg, z=z).enhanced
    routed = enhance(y, net, SamplerConfig(nfe=1), cfg, z=z).enhanced
    np.testing.assert_array_equal(single, multi)
    np.testing.assert_array_equal(single, routed)


# ==================== 欧拉基线 ====================


# 测试用例 6：欧拉法一阶收敛
def test_euler_is_first_order():
    order, _ = check_euler_order()
    assert 0.9 <= order <= 1.1


# 测试用例 7：瞬时视图的两种约定
def test_instantaneous_view_flowse_is_diagonal():
    problem = make_affine_problem(dim=2, seed=6)
    view = instantaneous_view(problem.field, "flowse")
    np.testing.assert_allclose(
        view(problem.x, 0.3, problem.y), problem.field.velocity(problem.x, 0.3), atol=1e-14
    )


def test_instantaneous_view_meanflowse_reverses_time():
    problem = make_affine_problem(dim=2, seed=7, n=4)
    view = instantaneous_view(problem.field, "meanflowse")
    out = euler_fm(
        np.zeros_like(problem.x), view, SamplerSchedule.euler(4000), x0=problem.x
    ).enhanced
    expected = problem.field.trajectory(problem.x, 1.0, 0.0)
    np.testing.assert_allclose(out, expected, atol=1e-2)


def test_instantaneous_view_rejects_unknown_convention():
    with pytest.raises(ScheduleError):
        instantaneous_view(_net(6), "reverse")


def test_euler_counts_calls_and_routes():
    rng = np.random.default_rng(3)
    y = rng.normal(size=(4, 6))
    result = enhance(y, _net(6), SamplerConfig(mode="euler", nfe=3), PathConfig(convention="flowse"), rng)
    assert result.nfe == 3
    assert result.enhanced.shape == y.shape


# ==================== 退化场与小步极限 ====================


# 测试用例 8：退化场：u ≡ 0 不动，u ≡ c 平移 (T_rev - t_ε)·c
class _ConstantField(AverageField):
    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64).reshape(1, -1)

    def __call__(self, x, r, t, y):
        return x * 0.0 + Tensor(self.c)


def test_displace_step_with_degenerate_fields():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    c = np.array([0.5, -1.0, 2.0])

    np.testing.assert_array_equal(displace_step(x, 0.9, 0.3, y, _ConstantField(np.zeros(3))), x)
    np.testing.assert_allclose(displace_step(x, 0.9, 0.3, y, _ConstantField(c)), x - 0.6 * c, rtol=0, atol=1e-14)


@pytest.mark.parametrize("nfe", [1, 4, 7])
def test_multi_step_with_degenerate_fields(nfe):
    rng = np.random.default_rng(6)
    y, z = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    cfg = PathConfig(t_rev=0.9, t_eps=0.1)
    schedule = SamplerSchedule.displacement(nfe, cfg.t_rev, cfg.t_eps)
    start = reverse_init(y, cfg.t_rev, cfg=cfg, z=z)
    c = np.array([0.5, -1.0, 2.0])

    still = enhance_multi_step(y, _ConstantField(np.zeros(3)), schedule, cfg, z=z)
    np.testing.assert_array_equal(still.enhanced, start)
    moved = enhance_multi_step(y, _ConstantField(c), schedule, cfg, z=z)
    np.testing.assert_allclose(moved.enhanced, start - 0.8 * c, rtol=0, atol=1e-12)


# 测试用例 9：步数增大时位移采样趋于瞬时场的欧拉解
def test_displacement_converges_to_euler():
    dim = 4
    net = _net(dim, seed=9)
    rng = np.random.default_rng(10)
    y, z = rng.normal(size=(8, dim)), rng.normal(size=(8, dim))
    cfg = PathConfig()
    start = reverse_init(y, cfg.t_rev, cfg=cfg, z=z)

    view = instantaneous_view(net, "meanflowse")
    reference = euler_fm(y, view, SamplerSchedule.euler(2000), x0=start).enhanced

    errors = []
    for nfe in (4, 16, 64):
        out = enhance_multi_step(y, net, SamplerSchedule.displacement(nfe), cfg, z=z).enhanced
        errors.append(float(np.max(np.abs(out - reference))))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 0.25 * errors[0]


# ==================== 端到端与 RTF ====================


# 测试用例 10：RTF 取计时中位数，预热不计入
def test_measure_rtf_uses_median():
    calls = []

    def pipeline(w):
        calls.append(len(w.samples))
        return EnhanceResult(enhanced=np.zeros(1), nfe=2, wall_seconds=0.0)

    durations = [5.0, 1.0, 2.0, 9.0, 3.0, 4.0, 8.0, 7.0, 6.0, 10.0]
    stamps, now = [], 0.0
    for d in durations:
        stamps += [now, now + d]
        now += d + 1.0
    ticks = iter(stamps)
    result = measure_rtf(Waveform(np.zeros(16000)), pipeline, warmup_runs=3, timed_runs=10, clock=lambda: next(ticks))
    assert len(calls) == 13
    assert result.wall_seconds == 5.5
    assert result.rtf == 5.5
    assert result.nfe == 2


def test_measure_rtf_requires_protocol_counts():
    def pipeline(w):
        return EnhanceResult(enhanced=np.zeros(1), nfe=1, wall_seconds=0.0)

    wave = Waveform(np.zeros(16000))
    with pytest.raises(ScheduleError):
        measure_rtf(wave, pipeline, timed_runs=9)
    with pytest.raises(ScheduleError):
        measure_rtf(wave, pipeline, warmup_runs=2)
    with pytest.raises(ValidationError):
        SamplerConfig(timed_runs=5)
    with pytest.raises(ValidationError):
        SamplerConfig(warmup_runs=0)


# 测试用例 11：波形增强保持长度并给出正的 RTF
@pytest.mark.parametrize("mode,nfe", [("mf", 1), ("mf", 2), ("euler", 2)])
def test_enhance_waveform_preserves_length(mode, nfe):
    net = MeanFlowNet(init_params(FieldConfig(width=16, n_blocks=1, embed_dim=8), 514))
    noisy = Waveform(np.random.default_rng(5).normal(0.0, 0.3, 4000))
    path_cfg = PathConfig(convention="flowse") if mode == "euler" else PathConfig()
    result = enhance_waveform(
        noisy, net, SamplerConfig(mode=mode, nfe=nfe), path_cfg, rng=np.random.default_rng(0)
    )
    assert len(result.waveform) == len(noisy)
    assert result.nfe == nfe
    assert result.rtf > 0
    assert np.all(np.isfinite(result.waveform.samples))
