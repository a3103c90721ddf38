"""
field_network - 条件平均速度场 u(x, r, t | y)

- MeanFlowNet: 通道拼接 (x, y) + t 与 Δ=t-r 的高斯傅里叶嵌入 + 残差 SiLU 主干，零初始化输出头
- AnalyticAverageField: 仿射动力学 v = a⊙x + b(τ) 的闭式平均速度，用作解析预言机
- CountingField: 统计网络前向次数（NFE）
- "MFNN" 检查点读写

所有场都以逐行形式工作：x、y 形状为 (N, D)，r、t 为标量或 (N,) 数组。
"""

from __future__ import annotations

import json
import logging
import math
import struct
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from meanflowse.errors import (
    MeanFlowError,
    PathError,
    ShapeMismatchError,
    UnsupportedFieldError,
)
from meanflowse.models import FieldConfig
from meanflowse.tools.tensor_core import Tensor, concat, cos, exp, jvp, silu, sin

logger = logging.getLogger(__name__)

TimeLike = Union[float, np.ndarray]

_SERIES_RADIUS = 0.5
_SERIES_TERMS = 18


# ==================== 查询 ====================


def _time_column(value: TimeLike, n: int) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        return np.full((n, 1), float(v))
    if v.shape == (n,):
        return v.reshape(n, 1)
    if v.shape == (n, 1):
        return v
    raise ShapeMismatchError("time", v.shape, (n,))


@dataclass
class FieldQuery:
    """场的求值点 (x, r, t, y)，span = t - r"""

    x: np.ndarray
    r: TimeLike
    t: TimeLike
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.t, dtype=np.float64) - np.asarray(self.r, dtype=np.float64)

    def columns(self) -> Tuple[np.ndarray, np.ndarray]:
        return _time_column(self.r, self.n), _time_column(self.t, self.n)

    def validate(self) -> "FieldQuery":
        if self.x.ndim != 2:
            raise ShapeMismatchError("FieldQuery.x", self.x.shape)
        if self.y.shape != self.x.shape:
            raise ShapeMismatchError("FieldQuery", self.x.shape, self.y.shape)
        r, t = self.columns()
        if np.any(r < 0) or np.any(t > 1) or np.any(r > t):
            raise PathError("查询时间必须满足 0 ≤ r ≤ t ≤ 1")
        return self


# ==================== 场的公共接口 ====================


class AverageField(ABC):
    """
    平均速度场基类

    子类只需实现基于 tensor_core 原语的 __call__(x, r, t, y)；
    forward / forward_with_jvp / finite_difference_total_derivative 对所有场通用。
    """

    @abstractmethod
    def __call__(self, x: Tensor, r: Tensor, t: Tensor, y: Tensor) -> Tensor:
        ...

    def parameters(self) -> List[Tensor]:
        return []

    def evaluate(self, x: np.ndarray, r: TimeLike, t: TimeLike, y: np.ndarray) -> np.ndarray:
        """不做区间校验的直接求值（差分扰动会越过 [0, 1]）"""
        n = x.shape[0]
        out = self(Tensor(x), Tensor(_time_column(r, n)), Tensor(_time_column(t, n)), Tensor(y))
        return out.data

    def forward(self, q: FieldQuery) -> np.ndarray:
        q.validate()
        r, t = q.columns()
        return self.evaluate(q.x, r, t, q.y)

    def forward_with_jvp(
        self, q: FieldQuery, dx: np.ndarray, dt: TimeLike = 1.0
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        返回 u(q) 与沿切向 (dx, dt, 0, 0) 的方向导数

        dx = v(x_t), dt = 1 时即为全导数 v·∇ₓu + ∂ₜu。
        """
        q.validate()
        dx = np.asarray(dx, dtype=np.float64)
        if dx.shape != q.x.shape:
            raise ShapeMismatchError("forward_with_jvp", q.x.shape, dx.shape)
        r, t = q.columns()
        r_const, y_const = Tensor(r), Tensor(q.y)

        def f(x: Tensor, tt: Tensor) -> Tensor:
            return self(x, r_const, tt, y_const)

        u, du = jvp(f, [q.x, t], [dx, _time_column(dt, q.n)])
        return u.data, du.data

    def finite_difference_total_derivative(
        self, q: FieldQuery, dx: np.ndarray, dt: TimeLike = 1.0, h: float = 1e-3
    ) -> np.ndarray:
        """中心差分：只扰动 (x, t)，(y, r) 视为常量"""
        if h <= 0:
            raise ValueError(f"差分步长必须为正，实际 {h}")
        q.validate()
        dx = np.asarray(dx, dtype=np.float64)
        if dx.shape != q.x.shape:
            raise ShapeMismatchError("finite_difference", q.x.shape, dx.shape)
        r, t = q.columns()
        dtc = _time_column(dt, q.n)
        plus = self.evaluate(q.x + h * dx, r, t + h * dtc, q.y)
        minus = self.evaluate(q.x - h * dx, r, t - h * dtc, q.y)
        return (plus - minus) / (2.0 * h)


# ==================== 可学习网络 ====================


@dataclass
class FieldParams:
    """
    网络参数

    Attributes:
        weights: 可训练张量，按固定顺序存放
        frozen: 初始化后冻结的嵌入频率
    """

    weights: Dict[str, Tensor]
    frozen: Dict[str, np.ndarray]
    config: FieldConfig
    dim: int

    def trainable(self) -> List[Tensor]:
        return list(self.weights.values())

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.weights.items()}

    def copy(self) -> "FieldParams":
        return FieldParams(
            weights={k: Tensor(v.data.copy()) for k, v in self.weights.items()},
            frozen={k: v.copy() for k, v in self.frozen.items()},
            config=self.config,
            dim=self.dim,
        )

    def assign(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            self.weights[name].data = value


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    cfg: FieldConfig, dim: int, seed: Optional[int] = None, dtype: str = "float64"
) -> FieldParams:
    """
    初始化网络参数

    主干为缩放均匀分布，输出头全零（初始场恒为零）；
    嵌入角频率 ω ~ N(0, embed_scale²) 采样一次后冻结。
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    half = cfg.embed_dim // 2
    width = cfg.width
    frozen = {
        "embed_t.freq": rng.normal(0.0, cfg.embed_scale, size=(1, half)),
        "embed_s.freq": rng.normal(0.0, cfg.embed_scale, size=(1, half)),
    }

    arrays: Dict[str, np.ndarray] = {
        "in.weight": _uniform(rng, 2 * dim, width),
        "in.bias": np.zeros(width),
        "embed_t.weight": _uniform(rng, cfg.embed_dim, width),
        "embed_t.bias": np.zeros(width),
        "embed_s.weight": _uniform(rng, cfg.embed_dim, width),
        "embed_s.bias": np.zeros(width),
    }
    for i in range(cfg.n_blocks):
        arrays[f"block{i}.fc1.weight"] = _uniform(rng, width, width)
        arrays[f"block{i}.fc1.bias"] = np.zeros(width)
        arrays[f"block{i}.cond.weight"] = _uniform(rng, width, width)
        arrays[f"block{i}.fc2.weight"] = _uniform(rng, width, width)
        arrays[f"block{i}.fc2.bias"] = np.zeros(width)
    arrays["head.weight"] = np.zeros((width, dim))
    arrays["head.bias"] = np.zeros(dim)

    np_dtype = np.dtype(dtype)
    weights = {k: Tensor(v.astype(np_dtype)) for k, v in arrays.items()}
    frozen = {k: v.astype(np_dtype) for k, v in frozen.items()}
    n_params = sum(v.size for v in arrays.values())
    logger.info(f"初始化 MeanFlowNet: dim={dim}, width={width}, blocks={cfg.n_blocks}, 参数量={n_params}")
    return FieldParams(weights=weights, frozen=frozen, config=cfg, dim=dim)


class MeanFlowNet(AverageField):
    """条件平均速度网络 u_θ(x, r, t | y)"""

    def __init__(self, params: FieldParams):
        self.params = params

    def parameters(self) -> List[Tensor]:
        return self.params.trainable()

    def _embed(self, tau: Tensor, name: str) -> Tensor:
        freq = Tensor(self.params.frozen[f"{name}.freq"])
        phase = tau * freq
        w = self.params.weights
        return silu(concat([sin(phase), cos(phase)]) @ w[f"{name}.weight"] + w[f"{name}.bias"])

    def __call__(self, x: Tensor, r: Tensor, t: Tensor, y: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.params.dim:
            raise ShapeMismatchError("MeanFlowNet", x.shape, (None, self.params.dim))
        if y.shape != x.shape:
            raise ShapeMismatchError("MeanFlowNet", x.shape, y.shape)
        w = self.params.weights

        h = concat([x, y]) @ w["in.weight"] + w["in.bias"]
        cond = self._embed(t, "embed_t") + self._embed(t - r, "embed_s")
        for i in range(self.params.config.n_blocks):
            z = silu(h @ w[f"block{i}.fc1.weight"] + w[f"block{i}.fc1.bias"] + cond @ w[f"block{i}.cond.weight"])
            h = h + z @ w[f"block{i}.fc2.weight"] + w[f"block{i}.fc2.bias"]
        return silu(h) @ w["head.weight"] + w["head.bias"]


# ==================== 解析参考场 ====================


def _series(z: Any, k: int) -> Any:
    coeffs = [(-1.0) ** n / (math.factorial(n) * (n + k + 1)) for n in range(_SERIES_TERMS)]
    acc: Any = coeffs[-1]
    for c in reversed(coeffs[:-1]):
        acc = acc * z + c
    return acc


def _h_family(z: Any, small: np.ndarray, exp_fn: Callable[[Any], Any], kmax: int) -> List[Any]:
    """
    h_k(z) = ∫₀¹ e^{-zs} sᵏ ds，k = 0..kmax

    |z| < 0.5 的位置用泰勒级数，其余用分部积分递推；small 为 0/1 掩码。
    """
    zs = z + small
    e = exp_fn(-zs)
    closed = [(1.0 - e) / zs]
    for k in range(1, kmax + 1):
        closed.append((k * closed[-1] - e) / zs)
    return [small * _series(z, k) + (1.0 - small) * c for k, c in enumerate(closed)]


def _col(v: TimeLike) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 else v


class AnalyticAverageField(AverageField):
    """
    仿射动力学 dx/dτ = a⊙x + b(τ)，b(τ) = b0 + b1·τ + b2·τ²

    闭式平均速度（Δ = t - r，z = a·Δ）：
        u = a·h0·x + β0·h0 + β1·Δ·h1 + β2·Δ²·h2
    其中 β0 = b(r)，β1 = b'(r)，β2 = b2。y 不参与动力学。
    """

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        self.b = np.asarray(b, dtype=np.float64).reshape(3, -1)

    @property
    def dim(self) -> int:
        return max(self.a.shape[-1], self.b.shape[-1])

    def b_at(self, tau: TimeLike) -> np.ndarray:
        tau = _col(tau)
        return self.b[0] + self.b[1] * tau + self.b[2] * tau * tau

    def velocity(self, x: np.ndarray, t: TimeLike) -> np.ndarray:
        return self.a * x + self.b_at(t)

    def _terms(self, r: TimeLike, t: TimeLike, kmax: int):
        r, t = _col(r), _col(t)
        span = t - r
        z = self.a * span
        small = (np.abs(z) < _SERIES_RADIUS).astype(np.float64)
        hs = _h_family(z, small, np.exp, kmax)
        beta0 = self.b_at(r)
        beta1 = self.b[1] + 2.0 * self.b[2] * r
        return span, hs, beta0, beta1, self.b[2]

    def average(self, x: np.ndarray, r: TimeLike, t: TimeLike) -> np.ndarray:
        span, (h0, h1, h2), beta0, beta1, beta2 = self._terms(r, t, 2)
        return self.a * h0 * x + beta0 * h0 + beta1 * span * h1 + beta2 * span * span * h2

    def grad_x_average(self, x: np.ndarray, r: TimeLike, t: TimeLike) -> np.ndarray:
        """∇ₓu 的对角元"""
        _, (h0,), _, _, _ = self._terms(r, t, 0)
        return np.broadcast_to(self.a * h0, np.broadcast_shapes(np.shape(x), np.shape(h0))).copy()

    def partial_t_average(self, x: np.ndarray, r: TimeLike, t: TimeLike) -> np.ndarray:
        span, (h0, h1, h2, h3), beta0, beta1, beta2 = self._terms(r, t, 3)
        a = self.a
        return (
            -a * a * x * h1
            - a * beta0 * h1
            + beta1 * (h1 - a * span * h2)
            + beta2 * (2.0 * span * h2 - a * span * span * h3)
        )

    def total_derivative(self, x: np.ndarray, r: TimeLike, t: TimeLike) -> np.ndarray:
        """du/dt = v(x, t)·∇ₓu + ∂ₜu"""
        return self.velocity(x, t) * self.grad_x_average(x, r, t) + self.partial_t_average(x, r, t)

    def trajectory(self, x_t: np.ndarray, t: TimeLike, s: TimeLike) -> np.ndarray:
        """经过 (t, x_t) 的真实轨迹在时刻 s 的位置"""
        return x_t - (_col(t) - _col(s)) * self.average(x_t, s, t)

    def __call__(self, x: Tensor, r: Tensor, t: Tensor, y: Tensor) -> Tensor:
        span = t - r
        z = span * Tensor(self.a.reshape(1, -1))
        small = (np.abs(z.data) < _SERIES_RADIUS).astype(z.dtype)
        h0, h1, h2 = _h_family(z, small, exp, 2)
        b0, b1, b2 = (Tensor(row.reshape(1, -1)) for row in self.b)
        beta0 = b0 + b1 * r + b2 * r * r
        beta1 = b1 + 2.0 * b2 * r
        return Tensor(self.a.reshape(1, -1)) * h0 * x + beta0 * h0 + beta1 * span * h1 + b2 * span * span * h2


def analytic_average_field(A: Any, b_spec: Sequence[Any] = (0.0,)) -> AnalyticAverageField:
    """
    构造仿射参考场

    Args:
        A: 对角矩阵 (D, D)、对角元向量 (D,) 或标量
        b_spec: 多项式系数 (b0[, b1[, b2]])，每项为标量或 (D,) 向量

    Raises:
        UnsupportedFieldError: A 非对角或 b 的次数超过 2
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        if A.shape[0] != A.shape[1] or np.any(A != np.diag(np.diag(A))):
            raise UnsupportedFieldError("只支持对角矩阵 A")
        a = np.diag(A).copy()
    elif A.ndim <= 1:
        a = np.atleast_1d(A)
    else:
        raise UnsupportedFieldError(f"A 的维度不受支持: {A.shape}")

    coeffs = [np.atleast_1d(np.asarray(c, dtype=np.float64)) for c in b_spec]
    if len(coeffs) > 3:
        raise UnsupportedFieldError(f"b(τ) 至多二次，实际给出 {len(coeffs)} 个系数")
    width = max([a.shape[-1]] + [c.shape[-1] for c in coeffs])
    b = np.zeros((3, width))
    for k, c in enumerate(coeffs):
        b[k] = np.broadcast_to(c, (width,))
    return AnalyticAverageField(np.broadcast_to(a, (width,)).copy(), b)


# ==================== NFE 计数 ====================


class CountingField(AverageField):
    """包装任意场并统计前向次数（线程安全）"""

    def __init__(self, inner: AverageField):
        self.inner = inner
        self.count = 0
        self._lock = threading.Lock()

    def __call__(self, x: Tensor, r: Tensor, t: Tensor, y: Tensor) -> Tensor:
        with self._lock:
            self.count += 1
        return self.inner(x, r, t, y)

    def parameters(self) -> List[Tensor]:
        return self.inner.parameters()

    def reset(self) -> None:
        with self._lock:
            self.count = 0


# ==================== 检查点 ====================

_CKPT_MAGIC = b"MFNN"
_CKPT_VERSION = 1
_DTYPE_TAGS = {"float32": 0, "float64": 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """load_checkpoint 的返回值"""

    params: FieldParams
    ema: Optional[FieldParams] = None
    extra: Dict[str, Any] = dc_field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = dc_field(default_factory=dict)


def _pack_tensor(name: str, arr: np.ndarray, precision: Optional[str]) -> bytes:
    dtype_name = precision or np.dtype(arr.dtype).name
    if dtype_name not in _DTYPE_TAGS:
        raise MeanFlowError(f"检查点不支持的精度: {dtype_name}")
    tag = _DTYPE_TAGS[dtype_name]
    payload = np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag])
    encoded = name.encode("utf-8")
    head = struct.pack("<I", len(encoded)) + encoded + struct.pack("<BI", tag, payload.ndim)
    head += struct.pack(f"<{payload.ndim}I", *payload.shape)
    return head + payload.tobytes(order="C")


def save_checkpoint(
    path: Union[str, Path],
    params: FieldParams,
    ema: Optional[FieldParams] = None,
    extra: Optional[Dict[str, Any]] = None,
    tensors: Optional[Dict[str, np.ndarray]] = None,
    precision: Optional[str] = None,
) -> Path:
    """
    写出 "MFNN" 检查点

    布局：magic、version(u32)、元数据 JSON 长度(u32) + JSON、张量个数(u32)，
    每个张量为 名称、dtype 标记(u8, 0=f32 1=f64)、维数、各维大小、小端数据。

    Args:
        ema: EMA 影子参数
        extra: 写入元数据的 JSON 可序列化字典（步数、种子等）
        tensors: 额外的命名数组（如优化器状态）
        precision: None 保持原精度；"float32" 用于推理导出
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "dim": params.dim,
        "field": params.config.model_dump(),
        "has_ema": ema is not None,
        "extra": extra or {},
    }
    named: List[Tuple[str, np.ndarray]] = []
    named += [(f"params/{k}", v.data) for k, v in params.weights.items()]
    named += [(f"frozen/{k}", v) for k, v in params.frozen.items()]
    if ema is not None:
        named += [(f"ema/{k}", v.data) for k, v in ema.weights.items()]
    named += [(f"extra/{k}", np.asarray(v)) for k, v in (tensors or {}).items()]

    meta_bytes = json.dumps(meta, ensure_ascii=False).encode("utf-8")
    chunks = [
        _CKPT_MAGIC,
        struct.pack("<II", _CKPT_VERSION, len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", len(named)),
    ]
    chunks += [_pack_tensor(name, arr, precision) for name, arr in named]
    path.write_bytes(b"".join(chunks))
    logger.debug(f"检查点已写出: {path} ({len(named)} 个张量)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """读取 "MFNN" 检查点"""
    path = Path(path)
    if not path.exists():
        raise MeanFlowError(f"检查点不存在: {path}")
    raw = path.read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise MeanFlowError(f"{path}: 不是 MFNN 检查点")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != _CKPT_VERSION:
        raise MeanFlowError(f"{path}: 不支持的检查点版本 {version}")
    offset = 12
    meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, ndim = struct.unpack_from("<BI", raw, offset)
        offset += 5
        shape = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes

    cfg = FieldConfig(**meta["field"])
    dim = int(meta["dim"])

    def _section(prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    frozen = _section("frozen/")
    params = FieldParams(
        weights={k: Tensor(v) for k, v in _section("params/").items()},
        frozen=frozen,
        config=cfg,
        dim=dim,
    )
    ema = None
    if meta.get("has_ema"):
        ema = FieldParams(
            weights={k: Tensor(v) for k, v in _section("ema/").items()},
            frozen={k: v.copy() for k, v in frozen.items()},
            config=cfg,
            dim=dim,
        )
    return Checkpoint(params=params, ema=ema, extra=meta.get("extra", {}), tensors=_section("extra/"))
