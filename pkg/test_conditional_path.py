# -*- coding: utf-8 -*-
"""
conditional_path 测试：对偶路径与 FlowSE 路径的端点、速度与校验
"""

import numpy as np
import pytest

from meanflowse.errors import PathError, ShapeMismatchError
from meanflowse.models import PathConfig
from meanflowse.tools.conditional_path import (
    noisy_prior,
    reverse_init,
    sample_path,
    sample_path_flowse,
    sample_path_meanflowse,
    sample_times_flowse,
    sigma_at,
)


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    return rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))


# 测试用例 1：对偶路径端点（t=0 纯净，t=1 带噪）
def test_meanflowse_endpoints(pair):
    x1, y, z = pair
    cfg = PathConfig()
    s0 = sample_path_meanflowse(x1, y, 0.0, cfg=cfg, z=z)
    s1 = sample_path_meanflowse(x1, y, 1.0, cfg=cfg, z=z)
    np.testing.assert_array_equal(s0.mu_t, x1)
    np.testing.assert_allclose(s1.mu_t, y, atol=1e-15)
    assert float(s0.sigma_t) == cfg.sigma_min
    assert float(s1.sigma_t) == cfg.sigma_max


# 测试用例 2：条件速度等于 x_t 对 t 的导数（同一 z）
@pytest.mark.parametrize("convention", ["meanflowse", "flowse"])
def test_velocity_is_time_derivative(pair, convention):
    x1, y, z = pair
    cfg = PathConfig(convention=convention)
    t, h = 0.4, 1e-6
    mid = sample_path(x1, y, t, None, cfg, z=z)
    plus = sample_path(x1, y, t + h, None, cfg, z=z)
    minus = sample_path(x1, y, t - h, None, cfg, z=z)
    np.testing.assert_allclose((plus.x_t - minus.x_t) / (2 * h), mid.v_t, rtol=1e-6, atol=1e-8)
    assert mid.convention == convention


def test_flowse_velocity_closed_form(pair):
    x1, y, z = pair
    cfg = PathConfig(convention="flowse")
    s = sample_path_flowse(x1, y, 0.25, cfg=cfg, z=z)
    np.testing.assert_allclose(s.v_t, x1 - y - cfg.sigma * z, atol=1e-12)


# 测试用例 3：逐样本时间 (B,) 广播到 (B, S, D)
def test_per_sample_times_broadcast(pair):
    x1, y, z = pair
    t = np.array([0.0, 0.5, 1.0])
    s = sample_path_meanflowse(x1, y, t, z=z)
    np.testing.assert_array_equal(s.mu_t[0], x1[0])
    np.testing.assert_allclose(s.mu_t[1], 0.5 * x1[1] + 0.5 * y[1])
    np.testing.assert_allclose(s.x_t[2], y[2] + 0.5 * z[2])


# 测试用例 4：参数校验
def test_validation_errors(pair):
    x1, y, z = pair
    with pytest.raises(ShapeMismatchError):
        sample_path_meanflowse(x1, y[:, :2], 0.5, z=z)
    with pytest.raises(PathError):
        sample_path_meanflowse(x1, y, 1.5, z=z)
    with pytest.raises(PathError):
        sample_path_flowse(x1, y, 0.99, cfg=PathConfig(convention="flowse", delta=0.03), z=z)
    with pytest.raises(PathError):
        sample_path_meanflowse(x1, y, 0.5)
    with pytest.raises(ShapeMismatchError):
        sample_path_meanflowse(x1, y, np.array([0.1, 0.2]), z=z)


def test_flowse_times_respect_delta():
    cfg = PathConfig(convention="flowse", delta=0.1)
    t = sample_times_flowse(10000, cfg, np.random.default_rng(1))
    assert t.min() >= 0.0 and t.max() <= 0.9


# 测试用例 5：反向初值与先验
def test_reverse_init(pair):
    _, y, z = pair
    cfg = PathConfig(sigma_min=0.0, sigma_max=0.0)
    x = reverse_init(y, 1.0, cfg=cfg)
    np.testing.assert_array_equal(x, y)
    assert x is not y

    cfg = PathConfig()
    x = reverse_init(y, 0.5, cfg=cfg, z=z)
    np.testing.assert_allclose(x, y + float(sigma_at(0.5, cfg)) * z)

    with pytest.raises(PathError):
        reverse_init(y, 0.0, cfg=cfg, z=z)
    with pytest.raises(PathError):
        reverse_init(y, 1.2, cfg=cfg, z=z)


@pytest.mark.parametrize("t_rev", [0.8, 1.0])
def test_reverse_init_monte_carlo(t_rev):
    n = 100_000
    cfg = PathConfig()
    y = np.broadcast_to(np.array([0.3, -1.2, 2.0, 0.0]), (n, 4)).copy()
    x = reverse_init(y, t_rev, rng=np.random.default_rng(12), cfg=cfg)
    sigma = float(sigma_at(t_rev, cfg))

    assert np.all(np.abs(x.mean(axis=0) - y[0]) < 4.0 * sigma / np.sqrt(n))
    np.testing.assert_allclose(x.std(axis=0), sigma, rtol=0.05)


def test_noisy_prior_uses_convention_sigma(pair):
    _, y, z = pair
    np.testing.assert_allclose(noisy_prior(y, cfg=PathConfig(convention="flowse", sigma=0.3), z=z), y + 0.3 * z)
    np.testing.assert_allclose(noisy_prior(y, cfg=PathConfig(sigma_max=0.4), z=z), y + 0.4 * z)
