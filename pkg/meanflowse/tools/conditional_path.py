"""
conditional_path - 条件插值路径与瞬时速度目标

两种约定：
- flowse:     t=0 为带噪端，t=1 为纯净端；μ_t = t·x1 + (1-t)·y，σ_t = (1-t)·σ
- meanflowse: t=0 为纯净端，t=1 为带噪端；μ_t = (1-t)·x1 + t·y，σ_t = (1-t)·σ_min + t·σ_max

时间参数可以是标量，也可以是与首维等长的一维数组（每个样本一个时间）。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from meanflowse.errors import PathError, ShapeMismatchError
from meanflowse.models import PathConfig

logger = logging.getLogger(__name__)

TimeLike = Union[float, np.ndarray]


@dataclass
class PathSample:
    """路径上的一次采样 (x_t, z, μ_t, σ_t, v_t)"""

    t: np.ndarray
    z: np.ndarray
    mu_t: np.ndarray
    sigma_t: np.ndarray
    x_t: np.ndarray
    v_t: np.ndarray
    convention: str = "meanflowse"


def _times(t: TimeLike, like: np.ndarray) -> np.ndarray:
    """把标量或 (B,) 时间整理成可与 like 广播的形状"""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    if t.ndim == 1 and like.ndim >= 1 and len(t) == like.shape[0]:
        return t.reshape((-1,) + (1,) * (like.ndim - 1))
    raise ShapeMismatchError("time", t.shape, like.shape)


def _check_pair(x1: np.ndarray, y: np.ndarray) -> None:
    if x1.shape != y.shape:
        raise ShapeMismatchError("sample_path", x1.shape, y.shape)


def _draw(z: Optional[np.ndarray], rng: Optional[np.random.Generator], like: np.ndarray) -> np.ndarray:
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != like.shape:
            raise ShapeMismatchError("z", z.shape, like.shape)
        return z
    if rng is None:
        raise PathError("需要提供 rng 或显式的 z")
    return rng.standard_normal(like.shape)


def sigma_at(t: TimeLike, cfg: PathConfig) -> np.ndarray:
    """当前约定下的 σ(t)"""
    t = np.asarray(t, dtype=np.float64)
    if cfg.convention == "flowse":
        return (1.0 - t) * cfg.sigma
    return (1.0 - t) * cfg.sigma_min + t * cfg.sigma_max


def sample_path_meanflowse(
    x1: np.ndarray,
    y: np.ndarray,
    t: TimeLike,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[PathConfig] = None,
    z: Optional[np.ndarray] = None,
) -> PathSample:
    """
    对偶线性高斯路径采样

    v_t = (σ_max - σ_min)·z + (y - x1)
    """
    cfg = cfg or PathConfig()
    x1 = np.asarray(x1, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x1, y)
    tb = _times(t, x1)
    if np.any(tb < 0) or np.any(tb > 1):
        raise PathError(f"t 必须在 [0, 1] 内，实际范围 [{tb.min()}, {tb.max()}]")
    z = _draw(z, rng, x1)

    mu = (1.0 - tb) * x1 + tb * y
    sigma = (1.0 - tb) * cfg.sigma_min + tb * cfg.sigma_max
    x_t = mu + sigma * z
    v_t = (cfg.sigma_max - cfg.sigma_min) * z + (y - x1)
    return PathSample(
        t=np.asarray(t, dtype=np.float64), z=z, mu_t=mu, sigma_t=np.asarray(sigma),
        x_t=x_t, v_t=v_t, convention="meanflowse",
    )


def sample_path_flowse(
    x1: np.ndarray,
    y: np.ndarray,
    t: TimeLike,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[PathConfig] = None,
    z: Optional[np.ndarray] = None,
) -> PathSample:
    """
    FlowSE 路径采样；t 必须不超过 1-δ

    v_t = (x1 - x_t) / (1 - t)
    """
    cfg = cfg or PathConfig(convention="flowse")
    x1 = np.asarray(x1, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x1, y)
    tb = _times(t, x1)
    limit = 1.0 - cfg.delta
    if np.any(tb < 0) or np.any(tb > limit):
        raise PathError(f"FlowSE 路径要求 t ∈ [0, {limit:.4f}]，实际最大 {float(np.max(tb))}")
    z = _draw(z, rng, x1)

    mu = tb * x1 + (1.0 - tb) * y
    sigma = (1.0 - tb) * cfg.sigma
    x_t = mu + sigma * z
    v_t = (x1 - x_t) / (1.0 - tb)
    return PathSample(
        t=np.asarray(t, dtype=np.float64), z=z, mu_t=mu, sigma_t=np.asarray(sigma),
        x_t=x_t, v_t=v_t, convention="flowse",
    )


def sample_path(
    x1: np.ndarray,
    y: np.ndarray,
    t: TimeLike,
    rng: Optional[np.random.Generator],
    cfg: PathConfig,
    z: Optional[np.ndarray] = None,
) -> PathSample:
    """按 cfg.convention 分派"""
    if cfg.convention == "flowse":
        return sample_path_flowse(x1, y, t, rng, cfg, z=z)
    return sample_path_meanflowse(x1, y, t, rng, cfg, z=z)


def sample_times_flowse(n: int, cfg: PathConfig, rng: np.random.Generator) -> np.ndarray:
    """FlowSE 基线训练时间 t ~ U[0, 1-δ]"""
    return rng.uniform(0.0, 1.0 - cfg.delta, size=n)


def reverse_init(
    y: np.ndarray,
    t_rev: float,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[PathConfig] = None,
    z: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    反向采样初值 x_{T_rev} = y + σ(T_rev)·z，σ 取对偶路径的调度
    """
    cfg = cfg or PathConfig()
    if not 0.0 < t_rev <= 1.0:
        raise PathError(f"T_rev 必须在 (0, 1] 内，实际 {t_rev}")
    y = np.asarray(y, dtype=np.float64)
    sigma = (1.0 - t_rev) * cfg.sigma_min + t_rev * cfg.sigma_max
    if sigma == 0.0:
        return y.copy()
    return y + sigma * _draw(z, rng, y)


def noisy_prior(
    y: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[PathConfig] = None,
    z: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    带噪端先验 N(y, σ²I)：flowse 约定取 σ(0)=σ，meanflowse 约定取 σ(1)=σ_max
    （欧拉基线的初值）
    """
    cfg = cfg or PathConfig()
    y = np.asarray(y, dtype=np.float64)
    sigma = cfg.sigma if cfg.convention == "flowse" else cfg.sigma_max
    if sigma == 0.0:
        return y.copy()
    return y + sigma * _draw(z, rng, y)
