"""
sampler - 推理采样

- 位移采样：x_{t_{k+1}} = x_{t_k} - Δ_k·u(x_{t_k}, r=t_{k+1}, t=t_k | y)，单步即 T_rev → t_ε
- FlowSE 欧拉基线：x_{t_i} = x_{t_{i-1}} + (t_i - t_{i-1})·v(x_{t_{i-1}}, t_{i-1} | y)
- NFE 由 CountingField 实际计数，RTF 取预热后多次计时的中位数
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, replace
from typing import Callable, List, Literal, Optional, Union

import numpy as np

from meanflowse.errors import ScheduleError, ShapeMismatchError
from meanflowse.models import FrontendConfig, PathConfig, SamplerConfig
from meanflowse.tools.conditional_path import noisy_prior, reverse_init
from meanflowse.tools.field_network import AverageField, CountingField, FieldQuery
from meanflowse.tools.signal_frontend import (
    ComplexSpectrogram,
    Waveform,
    analyze,
    denormalize,
    from_frames,
    peak_normalize,
    synthesize,
    to_frames,
)

logger = logging.getLogger(__name__)

SpecLike = Union[ComplexSpectrogram, np.ndarray]
InstantaneousField = Callable[[np.ndarray, float, np.ndarray], np.ndarray]

MIN_WARMUP_RUNS = 3
MIN_TIMED_RUNS = 10


# ==================== 时间网格 ====================


@dataclass
class SamplerSchedule:
    """
    采样时间网格

    displacement_mf: 严格递减 T_rev = t_0 > ... > t_N = t_ε
    euler_fm:        严格递增 0 = t_0 < ... < t_N = 1
    """

    mode: Literal["displacement_mf", "euler_fm"]
    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.validate()

    @property
    def nfe(self) -> int:
        return len(self.grid) - 1

    @property
    def t_rev(self) -> float:
        return float(self.grid[0])

    @property
    def t_eps(self) -> float:
        return float(self.grid[-1])

    @property
    def steps(self) -> np.ndarray:
        """每步步长 Δ_k（均为正）"""
        d = np.diff(self.grid)
        return -d if self.mode == "displacement_mf" else d

    def validate(self) -> None:
        g = self.grid
        if g.ndim != 1 or len(g) < 2:
            raise ScheduleError(f"时间网格至少需要两个点，实际 {g.shape}")
        if not np.all(np.isfinite(g)) or np.any(g < 0) or np.any(g > 1):
            raise ScheduleError("时间网格必须位于 [0, 1] 内")
        d = np.diff(g)
        if self.mode == "displacement_mf":
            if np.any(d >= 0):
                raise ScheduleError("位移采样网格必须严格递减")
        elif self.mode == "euler_fm":
            if np.any(d <= 0):
                raise ScheduleError("欧拉网格必须严格递增")
            if g[0] != 0.0 or g[-1] != 1.0:
                raise ScheduleError("欧拉网格必须从 0 开始到 1 结束")
        else:
            raise ScheduleError(f"未知的采样模式: {self.mode}")

    @classmethod
    def displacement(cls, nfe: int, t_rev: float = 1.0, t_eps: float = 0.0) -> "SamplerSchedule":
        """T_rev 到 t_ε 的均匀递减网格"""
        if nfe < 1:
            raise ScheduleError(f"nfe 必须 ≥ 1，实际 {nfe}")
        if t_eps >= t_rev:
            raise ScheduleError(f"需要 t_eps < T_rev，实际 {t_eps} ≥ {t_rev}")
        return cls("displacement_mf", np.linspace(t_rev, t_eps, nfe + 1))

    @classmethod
    def euler(cls, nfe: int) -> "SamplerSchedule":
        """0 到 1 的均匀递增网格"""
        if nfe < 1:
            raise ScheduleError(f"nfe 必须 ≥ 1，实际 {nfe}")
        return cls("euler_fm", np.linspace(0.0, 1.0, nfe + 1))


@dataclass
class EnhanceResult:
    """
    单次增强结果

    rtf 只在已知音频时长时给出（wall_seconds / audio_seconds）。
    """

    enhanced: SpecLike
    nfe: int
    wall_seconds: float
    rtf: Optional[float] = None
    waveform: Optional[Waveform] = None

    def __post_init__(self):
        if self.nfe < 1:
            raise ScheduleError(f"nfe 必须 ≥ 1，实际 {self.nfe}")


# ==================== 行布局辅助 ====================


def _rows(y_spec: SpecLike) -> np.ndarray:
    if isinstance(y_spec, ComplexSpectrogram):
        return to_frames(y_spec)
    rows = np.asarray(y_spec, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeMismatchError("sampler", rows.shape)
    return rows


def _wrap(rows: np.ndarray, like: SpecLike) -> SpecLike:
    if isinstance(like, ComplexSpectrogram):
        return from_frames(rows, like)
    return rows


def _audio_seconds(like: SpecLike) -> Optional[float]:
    if isinstance(like, ComplexSpectrogram) and like.length > 0:
        return like.length / 16000.0
    return None


def _result(rows: np.ndarray, like: SpecLike, nfe: int, started: float) -> EnhanceResult:
    wall = max(time.perf_counter() - started, 1e-12)
    seconds = _audio_seconds(like)
    return EnhanceResult(
        enhanced=_wrap(rows, like),
        nfe=nfe,
        wall_seconds=wall,
        rtf=wall / seconds if seconds else None,
    )


# ==================== 位移采样 ====================


def displace_step(
    x: np.ndarray, t_k: float, t_k1: float, y: np.ndarray, field: AverageField
) -> np.ndarray:
    """一次位移：x - (t_k - t_k1)·u(x, r=t_k1, t=t_k | y)，恰好一次网络前向"""
    if t_k <= t_k1:
        raise ScheduleError(f"位移步要求 t_k > t_k1，实际 {t_k} ≤ {t_k1}")
    u = field.forward(FieldQuery(x=x, r=t_k1, t=t_k, y=y))
    return x - (t_k - t_k1) * u


def enhance_multi_step(
    y_spec: SpecLike,
    field: AverageField,
    schedule: SamplerSchedule,
    path_cfg: Optional[PathConfig] = None,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
) -> EnhanceResult:
    """
    多步位移采样

    初值取带噪端边缘分布 x_{T_rev} ~ N(y, σ²(T_rev)I)。
    """
    if schedule.mode != "displacement_mf":
        raise ScheduleError(f"位移采样需要 displacement_mf 网格，实际 {schedule.mode}")
    started = time.perf_counter()
    path_cfg = path_cfg or PathConfig()
    y = _rows(y_spec)
    counter = CountingField(field)

    x = reverse_init(y, schedule.t_rev, rng, path_cfg, z=z)
    for t_k, t_k1 in zip(schedule.grid[:-1], schedule.grid[1:]):
        x = displace_step(x, float(t_k), float(t_k1), y, counter)

    if counter.count != schedule.nfe:
        raise ScheduleError(f"NFE 计数 {counter.count} 与网格步数 {schedule.nfe} 不一致")
    return _result(x, y_spec, counter.count, started)


def enhance_single_step(
    y_spec: SpecLike,
    field: AverageField,
    path_cfg: Optional[PathConfig] = None,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
) -> EnhanceResult:
    """单步位移：x̂ = x_{T_rev} - (T_rev - t_ε)·u(x_{T_rev}, r=t_ε, t=T_rev | y)"""
    path_cfg = path_cfg or PathConfig()
    schedule = SamplerSchedule.displacement(1, path_cfg.t_rev, path_cfg.t_eps)
    return enhance_multi_step(y_spec, field, schedule, path_cfg, rng, z=z)


# ==================== 欧拉基线 ====================


class InstantaneousView:
    """
    把平均速度场当作瞬时速度场使用（对角 r=t）

    flowse 约定：v(x, s) = u(x, s, s)
    meanflowse 约定：时间反向，v(x, s) = -u(x, 1-s, 1-s)
    """

    def __init__(self, field: AverageField, convention: str = "flowse"):
        if convention not in ("flowse", "meanflowse"):
            raise ScheduleError(f"未知的路径约定: {convention}")
        self.field = field
        self.convention = convention

    def __call__(self, x: np.ndarray, s: float, y: np.ndarray) -> np.ndarray:
        if self.convention == "flowse":
            return self.field.forward(FieldQuery(x=x, r=s, t=s, y=y))
        tau = 1.0 - s
        return -self.field.forward(FieldQuery(x=x, r=tau, t=tau, y=y))


def instantaneous_view(field: AverageField, convention: str) -> InstantaneousView:
    return InstantaneousView(field, convention)


def euler_fm(
    y_spec: SpecLike,
    velocity: InstantaneousField,
    schedule: SamplerSchedule,
    path_cfg: Optional[PathConfig] = None,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
    x0: Optional[np.ndarray] = None,
) -> EnhanceResult:
    """
    显式欧拉积分瞬时速度场

    Args:
        velocity: 可调用对象 v(x, s, y) -> 数组
        x0: 显式初值；默认从带噪端先验 N(y, σ²I) 采样
    """
    if schedule.mode != "euler_fm":
        raise ScheduleError(f"欧拉采样需要 euler_fm 网格，实际 {schedule.mode}")
    started = time.perf_counter()
    y = _rows(y_spec)
    if x0 is None:
        x = noisy_prior(y, rng, path_cfg or PathConfig(convention="flowse"), z=z)
    else:
        x = np.array(x0, dtype=np.float64)

    calls = 0
    for t_prev, t_next in zip(schedule.grid[:-1], schedule.grid[1:]):
        x = x + (float(t_next) - float(t_prev)) * velocity(x, float(t_prev), y)
        calls += 1
    return _result(x, y_spec, calls, started)


# ==================== 统一入口 ====================


def enhance(
    y_spec: SpecLike,
    field: AverageField,
    sampler_cfg: Optional[SamplerConfig] = None,
    path_cfg: Optional[PathConfig] = None,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
) -> EnhanceResult:
    """按 mode / nfe 分派到单步、多步位移或欧拉基线"""
    sampler_cfg = sampler_cfg or SamplerConfig()
    path_cfg = path_cfg or PathConfig()
    if sampler_cfg.mode == "euler":
        view = instantaneous_view(field, path_cfg.convention)
        return euler_fm(y_spec, view, SamplerSchedule.euler(sampler_cfg.nfe), path_cfg, rng, z=z)
    if sampler_cfg.nfe == 1:
        return enhance_single_step(y_spec, field, path_cfg, rng, z=z)
    schedule = SamplerSchedule.displacement(sampler_cfg.nfe, path_cfg.t_rev, path_cfg.t_eps)
    return enhance_multi_step(y_spec, field, schedule, path_cfg, rng, z=z)


def enhance_waveform(
    noisy: Waveform,
    field: AverageField,
    sampler_cfg: Optional[SamplerConfig] = None,
    path_cfg: Optional[PathConfig] = None,
    frontend_cfg: Optional[FrontendConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> EnhanceResult:
    """
    端到端增强：峰值归一化 → STFT/压缩 → 采样 → 解压/ISTFT → 还原幅度
    """
    started = time.perf_counter()
    frontend_cfg = frontend_cfg or FrontendConfig()
    noisy_n, _, scale = peak_normalize(noisy)
    spec = analyze(noisy_n, frontend_cfg, norm_scale=scale)
    result = enhance(spec, field, sampler_cfg, path_cfg, rng)
    wave = denormalize(synthesize(result.enhanced, frontend_cfg), scale)
    wall = max(time.perf_counter() - started, 1e-12)
    return replace(result, wall_seconds=wall, rtf=wall / noisy.duration_s, waveform=wave)


def measure_rtf(
    waveform: Waveform,
    pipeline: Callable[[Waveform], EnhanceResult],
    warmup_runs: int = 3,
    timed_runs: int = 10,
    clock: Callable[[], float] = time.perf_counter,
) -> EnhanceResult:
    """
    端到端 RTF：丢弃预热，取 timed_runs 次墙钟时间的中位数除以音频时长

    pipeline 必须覆盖 STFT 与 ISTFT。
    """
    if warmup_runs < MIN_WARMUP_RUNS:
        raise ScheduleError(f"warmup_runs 必须 ≥ {MIN_WARMUP_RUNS}，实际 {warmup_runs}")
    if timed_runs < MIN_TIMED_RUNS:
        raise ScheduleError(f"timed_runs 必须 ≥ {MIN_TIMED_RUNS}，实际 {timed_runs}")
    for _ in range(warmup_runs):
        pipeline(waveform)

    walls: List[float] = []
    result: Optional[EnhanceResult] = None
    for _ in range(timed_runs):
        start = clock()
        result = pipeline(waveform)
        walls.append(clock() - start)

    wall = statistics.median(walls)
    rtf = wall / waveform.duration_s
    logger.debug(f"RTF: 中位数 {wall:.4f}s / 音频 {waveform.duration_s:.2f}s = {rtf:.4f}（NFE={result.nfe}）")
    return replace(result, wall_seconds=wall, rtf=rtf)
