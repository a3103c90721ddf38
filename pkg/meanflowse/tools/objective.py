"""
objective - 训练目标与课程

- 瞬时分支（r = t）：CFM 损失 ‖u(x_t, t, t | y) - v_t‖²
- 均值分支（r < t）：u_tgt = v_t - c·(t - r)·[v_t·∇ₓu + ∂ₜu]，方括号项逐样本 ℓ2 裁剪后整体截断梯度
- 课程：均值分支权重线性升至上限，跨度指数 p 线性退火，按比例注入 r = t
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from meanflowse.errors import NonFiniteError, ShapeMismatchError
from meanflowse.models import LossReport, ObjectiveConfig, PathConfig
from meanflowse.tools.conditional_path import PathSample, sample_path
from meanflowse.tools.field_network import AverageField, FieldQuery
from meanflowse.tools.tensor_core import Tensor, no_record, stop_gradient

logger = logging.getLogger(__name__)


# ==================== 课程 ====================


def curriculum(step: int, cfg: ObjectiveConfig) -> Tuple[float, float]:
    """
    返回 (w_mean, p)：均值分支权重与跨度采样指数，均在 warmup_steps 内线性变化
    """
    frac = 1.0 if cfg.warmup_steps == 0 else min(1.0, step / cfg.warmup_steps)
    weight = cfg.mean_branch_weight_max * frac
    exponent = cfg.span_exponent_start + (cfg.span_exponent_end - cfg.span_exponent_start) * frac
    return weight, exponent


def sample_times(
    step: int, cfg: ObjectiveConfig, rng: np.random.Generator, n: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    采样 (r, t)

    以 diagonal_fraction 的概率取 r = t；否则 t ~ U(0,1)，Δ = t·ξ^p，r = t - Δ。
    n 为 None 时返回标量。
    """
    if step < 0:
        raise ValueError(f"step 必须非负，实际 {step}")
    _, p = curriculum(step, cfg)
    size = 1 if n is None else n
    t = rng.uniform(0.0, 1.0, size)
    xi = rng.uniform(0.0, 1.0, size)
    diagonal = rng.uniform(0.0, 1.0, size) < cfg.diagonal_fraction
    span = np.where(diagonal, 0.0, t * xi ** p)
    r = t - span
    if n is None:
        return r[0], t[0]
    return r, t


# ==================== 批 ====================


@dataclass
class PathBatch:
    """
    一批路径样本

    每个样本是 S 帧连续片段，片段内共享 (r, t)。
    数组形状：x_t / v_t / y 为 (B, S, D)，r / t 为 (B,)。
    """

    x_t: np.ndarray
    v_t: np.ndarray
    y: np.ndarray
    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.x_t.ndim != 3:
            raise ShapeMismatchError("PathBatch", self.x_t.shape)
        for name in ("v_t", "y"):
            if getattr(self, name).shape != self.x_t.shape:
                raise ShapeMismatchError(f"PathBatch.{name}", self.x_t.shape, getattr(self, name).shape)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if self.r.shape != (self.x_t.shape[0],) or self.t.shape != self.r.shape:
            raise ShapeMismatchError("PathBatch.times", self.r.shape, self.t.shape)

    @property
    def size(self) -> int:
        return self.x_t.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        return self.r == self.t

    def rows(self, mask: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ...]:
        """展开为逐行形式 (x, r, t, y, v)，时间为 (N,) 数组"""
        sel = np.ones(self.size, dtype=bool) if mask is None else mask
        s, d = self.x_t.shape[1], self.x_t.shape[2]
        x = self.x_t[sel].reshape(-1, d)
        y = self.y[sel].reshape(-1, d)
        v = self.v_t[sel].reshape(-1, d)
        r = np.repeat(self.r[sel], s)
        t = np.repeat(self.t[sel], s)
        return x, r, t, y, v

    def query(self) -> FieldQuery:
        x, r, t, y, _ = self.rows()
        return FieldQuery(x=x, r=r, t=t, y=y)


def make_batch(
    x1: np.ndarray,
    y: np.ndarray,
    r: np.ndarray,
    t: np.ndarray,
    path_cfg: PathConfig,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
) -> PathBatch:
    """在给定 (r, t) 上对 (B, S, D) 片段做路径采样"""
    sample = sample_path(x1, y, t, rng, path_cfg, z=z)
    return PathBatch(x_t=sample.x_t, v_t=sample.v_t, y=np.asarray(y, dtype=np.float64), r=r, t=t)


# ==================== 目标 ====================


def _describe(x: np.ndarray, v: np.ndarray, span: np.ndarray, bracket: np.ndarray) -> str:
    bad = ~np.isfinite(bracket)
    return (
        f"非有限元素 {int(bad.sum())}/{bracket.size}；"
        f"max|x_t|={np.max(np.abs(x)):.3e}，max|v_t|={np.max(np.abs(v)):.3e}，"
        f"Δ∈[{float(np.min(span)):.3e}, {float(np.max(span)):.3e}]"
    )


def _clip_per_sample(bracket: np.ndarray, groups: int, ceiling: float) -> Tuple[np.ndarray, float]:
    """逐样本 ℓ2 裁剪；只对范数超过上限的样本缩放"""
    if not np.isfinite(ceiling):
        return bracket, 0.0
    per = bracket.reshape(groups, -1)
    norms = np.sqrt(np.sum(per * per, axis=1))
    over = norms > ceiling
    if not np.any(over):
        return bracket, 0.0
    clipped = per.copy()
    clipped[over] = per[over] * (ceiling / norms[over])[:, None]
    return clipped.reshape(bracket.shape), float(np.mean(over))


def mfse_target(
    sample: PathSample,
    q: FieldQuery,
    field: AverageField,
    cfg: ObjectiveConfig,
) -> Tuple[Tensor, float]:
    """
    一阶回归目标 u_tgt = v_t - c·(t - r)·[v_t·∇ₓu + ∂ₜu]

    方括号项由 JVP（切向 dx = v_t, dt = 1）或中心差分计算，逐样本裁剪后
    整个目标截断梯度。

    Returns:
        (目标张量, 被裁剪样本比例)

    Raises:
        NonFiniteError: JVP 出现 NaN/Inf 且未开启差分回退
    """
    v = np.asarray(sample.v_t, dtype=np.float64).reshape(q.x.shape)
    if sample.x_t.size != q.x.size:
        raise ShapeMismatchError("mfse_target", np.shape(sample.x_t), q.x.shape)
    groups = sample.x_t.shape[0] if sample.x_t.ndim == 3 else q.n

    r, t = q.columns()
    span = t - r
    with no_record():
        if cfg.derivative == "finite_difference":
            bracket = field.finite_difference_total_derivative(q, v, 1.0, cfg.fd_step)
        else:
            _, bracket = field.forward_with_jvp(q, v, 1.0)
            if not np.all(np.isfinite(bracket)):
                detail = _describe(q.x, v, span, bracket)
                if not cfg.fallback_to_finite_difference:
                    raise NonFiniteError(f"JVP 结果非有限: {detail}")
                logger.warning(f"JVP 结果非有限，改用中心差分 (h={cfg.fd_step}): {detail}")
                bracket = field.finite_difference_total_derivative(q, v, 1.0, cfg.fd_step)

    if not np.all(np.isfinite(bracket)):
        raise NonFiniteError(f"全导数非有限: {_describe(q.x, v, span, bracket)}")

    bracket, fraction = _clip_per_sample(bracket, groups, cfg.jacobian_clip)
    target = v - cfg.c * span * bracket
    return stop_gradient(Tensor(target)), fraction


# ==================== 损失 ====================


def _branch_loss(
    field: AverageField, x: np.ndarray, r: np.ndarray, t: np.ndarray, y: np.ndarray, target
) -> Tensor:
    n = x.shape[0]
    u = field(Tensor(x), Tensor(r.reshape(n, 1)), Tensor(t.reshape(n, 1)), Tensor(y))
    diff = u - target
    return (diff * diff).mean()


def cfm_loss(batch: PathBatch, field: AverageField) -> Tensor:
    """E‖u(x_t, t, t | y) - v_t‖²（逐元素均值）"""
    x, _, t, y, v = batch.rows()
    return _branch_loss(field, x, t, t, y, Tensor(v))


def mfse_loss(
    batch: PathBatch,
    field: AverageField,
    cfg: ObjectiveConfig,
    step: int,
) -> Tuple[Tensor, LossReport]:
    """
    total = L_CFM(对角样本) + w_mean(step)·L_MFSE(非对角样本)

    全对角批次时 total 与 cfm_loss 逐位相同。
    """
    weight, exponent = curriculum(step, cfg)
    diagonal = batch.diagonal
    off = ~diagonal

    cfm_part: Optional[Tensor] = None
    if np.any(diagonal):
        x, r, t, y, v = batch.rows(diagonal)
        cfm_part = _branch_loss(field, x, r, t, y, Tensor(v))

    mf_part: Optional[Tensor] = None
    fraction = 0.0
    if np.any(off):
        x, r, t, y, v = batch.rows(off)
        segment = batch.x_t[off]
        sample = PathSample(
            t=batch.t[off], z=np.zeros_like(segment), mu_t=segment, sigma_t=np.zeros(()),
            x_t=segment, v_t=batch.v_t[off],
        )
        target, fraction = mfse_target(sample, FieldQuery(x=x, r=r, t=t, y=y), field, cfg)
        mf_part = _branch_loss(field, x, r, t, y, target)

    if mf_part is None:
        total = cfm_part
    elif cfm_part is None:
        total = weight * mf_part
    else:
        total = cfm_part + weight * mf_part

    cfm_value = cfm_part.item() if cfm_part is not None else 0.0
    mf_value = mf_part.item() if mf_part is not None else 0.0
    total_value = total.item()
    for name, value in (("cfm", cfm_value), ("mfse", mf_value), ("total", total_value)):
        if not np.isfinite(value):
            raise NonFiniteError(
                f"{name} 损失非有限 (step={step})；max|x_t|={np.max(np.abs(batch.x_t)):.3e}，"
                f"max|v_t|={np.max(np.abs(batch.v_t)):.3e}"
            )

    report = LossReport(
        step=step,
        cfm_loss=cfm_value,
        mfse_loss=mf_value,
        total=total_value,
        mean_weight=weight,
        span_exponent=exponent,
        fraction_clipped=fraction * float(np.mean(off)) if np.any(off) else 0.0,
        mean_span=float(np.mean(batch.t - batch.r)),
    )
    return total, report
