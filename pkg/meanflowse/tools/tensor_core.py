"""
tensor_core - 最小稠密实数张量与双模式自动微分

基于 NumPy 的实数张量：
- 反向模式：GradTape 记录被 watch 张量参与的运算，tape.gradient() 反向累加梯度
- 前向模式：张量可携带 tangent（切向量），每个原语同时传播 J·dx，用于 MeanFlow 目标中的 JVP
- 复数以 (实部, 虚部) 两个实通道表示，网络与微分全程保持实数

原语集合是固定的：matmul(仿射)、加减乘除、tanh、SiLU、sin、cos、exp、sum、mean、
concat、切片、reshape。对张量调用其他 numpy 函数会抛出 UnsupportedPrimitiveError。
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from meanflowse.errors import (
    MeanFlowError,
    NonScalarLossError,
    ShapeMismatchError,
    UnsupportedPrimitiveError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_local = threading.local()


def set_default_dtype(name: str) -> None:
    """设置新建常量张量的默认精度（"float64" 或 "float32"）"""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"不支持的精度: {name}，可选 {list(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextmanager
def default_dtype(name: str) -> Iterator[None]:
    """在 with 块内切换默认精度，退出时恢复原值"""
    previous = get_default_dtype().name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _tape_stack() -> List["GradTape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


# ==================== Tensor ====================


class Tensor:
    """
    稠密实数张量

    Attributes:
        data: 连续的 numpy 浮点数组
        tangent: 前向模式切向量（None 表示恒为零）
    """

    __slots__ = ("data", "tangent", "_tape", "__weakref__")

    def __init__(self, data: Any, tangent: Optional[np.ndarray] = None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_default_dtype)
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=self.data.dtype)
            if tangent.shape != self.data.shape:
                raise ShapeMismatchError("tangent", self.data.shape, tangent.shape)
        self.tangent = tangent
        self._tape: Optional[GradTape] = None

    # ---------- 基本属性 ----------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarLossError(f"item() 需要单元素张量，实际形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        dual = ", dual" if self.tangent is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{dual})"

    # ---------- 运算符 ----------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return _apply(_ADD, self, _as_tensor(other, self))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return _apply(_ADD, _as_tensor(other, self), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return _apply(_SUB, self, _as_tensor(other, self))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return _apply(_SUB, _as_tensor(other, self), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return _apply(_MUL, self, _as_tensor(other, self))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return _apply(_MUL, _as_tensor(other, self), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return _apply(_DIV, self, _as_tensor(other, self))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return _apply(_DIV, _as_tensor(other, self), self)

    def __neg__(self) -> "Tensor":
        return _apply(_NEG, self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return _apply(_MATMUL, self, _as_tensor(other, self))

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return _apply(_MATMUL, _as_tensor(other, self), self)

    def __getitem__(self, key: Any) -> "Tensor":
        return _apply(_GETITEM, self, key=key)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return _apply(_SUM, self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return _apply(_MEAN, self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _apply(_RESHAPE, self, shape=shape)

    # ---------- numpy 互操作：只放行受支持的原语 ----------

    _UFUNC_MAP: Dict[str, Callable[..., "Tensor"]] = {}

    def __array_ufunc__(self, ufunc: np.ufunc, method: str, *inputs: Any, **kwargs: Any):
        handler = Tensor._UFUNC_MAP.get(ufunc.__name__)
        if method != "__call__" or handler is None or kwargs:
            raise UnsupportedPrimitiveError(f"numpy.{ufunc.__name__}")
        return handler(*inputs)

    def __array_function__(self, func: Any, types: Any, args: Any, kwargs: Any):
        raise UnsupportedPrimitiveError(f"numpy.{func.__name__}")


def _as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(value, dtype=dtype))


def stop_gradient(x: ArrayLike) -> Tensor:
    """
    截断梯度：数值与 x 完全相同（共享同一数组），
    反向模式下不贡献梯度，前向模式下切向量为零。
    """
    return Tensor(x.data if isinstance(x, Tensor) else x)


# ==================== 原语 ====================


class _Context:
    __slots__ = ("inputs", "output", "attrs")

    def __init__(self, inputs: Tuple[np.ndarray, ...], attrs: Dict[str, Any]):
        self.inputs = inputs
        self.output: Optional[np.ndarray] = None
        self.attrs = attrs


class Primitive:
    """原语基类：forward 计算值，vjp 反向传播，jvp 前向传播"""

    name = "primitive"

    def forward(self, ctx: _Context, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, ctx: _Context, g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    def jvp(self, ctx: _Context, *dxs: Optional[np.ndarray]) -> np.ndarray:
        raise NotImplementedError


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _full(dx: Optional[np.ndarray], shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
    if dx is None:
        return np.zeros(shape, dtype=dtype)
    return np.broadcast_to(dx, shape)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class _Add(Primitive):
    name = "add"

    def forward(self, ctx, a, b):
        _broadcast_shape(self.name, a, b)
        return a + b

    def vjp(self, ctx, g):
        return g, g

    def jvp(self, ctx, da, db):
        out = ctx.output
        if da is None:
            return np.array(_full(db, out.shape, out.dtype))
        if db is None:
            return np.array(_full(da, out.shape, out.dtype))
        return da + db


class _Sub(Primitive):
    name = "sub"

    def forward(self, ctx, a, b):
        _broadcast_shape(self.name, a, b)
        return a - b

    def vjp(self, ctx, g):
        return g, -g

    def jvp(self, ctx, da, db):
        out = ctx.output
        if da is None:
            return -_full(db, out.shape, out.dtype)
        if db is None:
            return np.array(_full(da, out.shape, out.dtype))
        return da - db


class _Mul(Primitive):
    name = "mul"

    def forward(self, ctx, a, b):
        _broadcast_shape(self.name, a, b)
        return a * b

    def vjp(self, ctx, g):
        a, b = ctx.inputs
        return g * b, g * a

    def jvp(self, ctx, da, db):
        a, b = ctx.inputs
        out = ctx.output
        t = np.zeros(out.shape, dtype=out.dtype)
        if da is not None:
            t = t + da * b
        if db is not None:
            t = t + a * db
        return t


class _Div(Primitive):
    name = "div"

    def forward(self, ctx, a, b):
        _broadcast_shape(self.name, a, b)
        return a / b

    def vjp(self, ctx, g):
        a, b = ctx.inputs
        return g / b, -g * ctx.output / b

    def jvp(self, ctx, da, db):
        a, b = ctx.inputs
        out = ctx.output
        t = np.zeros(out.shape, dtype=out.dtype)
        if da is not None:
            t = t + da / b
        if db is not None:
            t = t - out * db / b
        return t


class _Neg(Primitive):
    name = "neg"

    def forward(self, ctx, a):
        return -a

    def vjp(self, ctx, g):
        return (-g,)

    def jvp(self, ctx, da):
        return -da


class _MatMul(Primitive):
    name = "matmul"

    def forward(self, ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(self.name, a.shape, b.shape)
        return a @ b

    def vjp(self, ctx, g):
        a, b = ctx.inputs
        return g @ b.T, a.T @ g

    def jvp(self, ctx, da, db):
        a, b = ctx.inputs
        t = None
        if da is not None:
            t = da @ b
        if db is not None:
            t = a @ db if t is None else t + a @ db
        return t


class _Tanh(Primitive):
    name = "tanh"

    def forward(self, ctx, a):
        return np.tanh(a)

    def vjp(self, ctx, g):
        y = ctx.output
        return (g * (1.0 - y * y),)

    def jvp(self, ctx, da):
        y = ctx.output
        return da * (1.0 - y * y)


class _SiLU(Primitive):
    name = "silu"

    def forward(self, ctx, a):
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        ctx.attrs["sigmoid"] = s
        return a * s

    def _slope(self, ctx) -> np.ndarray:
        (a,) = ctx.inputs
        s = ctx.attrs["sigmoid"]
        return s + a * s * (1.0 - s)

    def vjp(self, ctx, g):
        return (g * self._slope(ctx),)

    def jvp(self, ctx, da):
        return da * self._slope(ctx)


class _Sin(Primitive):
    name = "sin"

    def forward(self, ctx, a):
        return np.sin(a)

    def vjp(self, ctx, g):
        return (g * np.cos(ctx.inputs[0]),)

    def jvp(self, ctx, da):
        return da * np.cos(ctx.inputs[0])


class _Cos(Primitive):
    name = "cos"

    def forward(self, ctx, a):
        return np.cos(a)

    def vjp(self, ctx, g):
        return (-g * np.sin(ctx.inputs[0]),)

    def jvp(self, ctx, da):
        return -da * np.sin(ctx.inputs[0])


class _Exp(Primitive):
    name = "exp"

    def forward(self, ctx, a):
        return np.exp(a)

    def vjp(self, ctx, g):
        return (g * ctx.output,)

    def jvp(self, ctx, da):
        return da * ctx.output


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


class _Sum(Primitive):
    name = "sum"

    def forward(self, ctx, a):
        return np.asarray(a.sum(axis=ctx.attrs["axis"], keepdims=ctx.attrs["keepdims"]))

    def vjp(self, ctx, g):
        (a,) = ctx.inputs
        return (_expand_reduced(g, a.shape, ctx.attrs["axis"], ctx.attrs["keepdims"]),)

    def jvp(self, ctx, da):
        return np.asarray(da.sum(axis=ctx.attrs["axis"], keepdims=ctx.attrs["keepdims"]))


class _Mean(Primitive):
    name = "mean"

    def forward(self, ctx, a):
        return np.asarray(a.mean(axis=ctx.attrs["axis"], keepdims=ctx.attrs["keepdims"]))

    def vjp(self, ctx, g):
        (a,) = ctx.inputs
        axis = ctx.attrs["axis"]
        count = a.size if axis is None else a.shape[axis]
        return (_expand_reduced(g / count, a.shape, axis, ctx.attrs["keepdims"]),)

    def jvp(self, ctx, da):
        return np.asarray(da.mean(axis=ctx.attrs["axis"], keepdims=ctx.attrs["keepdims"]))


class _Concat(Primitive):
    name = "concat"

    def forward(self, ctx, *xs):
        axis = ctx.attrs["axis"]
        try:
            return np.concatenate(xs, axis=axis)
        except ValueError:
            raise ShapeMismatchError(self.name, *(x.shape for x in xs)) from None

    def vjp(self, ctx, g):
        axis = ctx.attrs["axis"]
        bounds = np.cumsum([x.shape[axis] for x in ctx.inputs])[:-1]
        return tuple(np.split(g, bounds, axis=axis))

    def jvp(self, ctx, *dxs):
        parts = [
            np.zeros(x.shape, dtype=x.dtype) if dx is None else dx
            for x, dx in zip(ctx.inputs, dxs)
        ]
        return np.concatenate(parts, axis=ctx.attrs["axis"])


class _GetItem(Primitive):
    name = "getitem"

    def forward(self, ctx, a):
        return np.array(a[ctx.attrs["key"]])

    def vjp(self, ctx, g):
        (a,) = ctx.inputs
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, ctx.attrs["key"], g)
        return (out,)

    def jvp(self, ctx, da):
        return np.array(da[ctx.attrs["key"]])


class _Reshape(Primitive):
    name = "reshape"

    def forward(self, ctx, a):
        try:
            return a.reshape(ctx.attrs["shape"])
        except ValueError:
            raise ShapeMismatchError(self.name, a.shape, ctx.attrs["shape"]) from None

    def vjp(self, ctx, g):
        return (g.reshape(ctx.inputs[0].shape),)

    def jvp(self, ctx, da):
        return da.reshape(ctx.attrs["shape"])


_ADD, _SUB, _MUL, _DIV, _NEG = _Add(), _Sub(), _Mul(), _Div(), _Neg()
_MATMUL, _TANH, _SILU, _SIN, _COS, _EXP = _MatMul(), _Tanh(), _SiLU(), _Sin(), _Cos(), _Exp()
_SUM, _MEAN, _CONCAT, _GETITEM, _RESHAPE = _Sum(), _Mean(), _Concat(), _GetItem(), _Reshape()

SUPPORTED_PRIMITIVES = tuple(
    p.name
    for p in (_ADD, _SUB, _MUL, _DIV, _NEG, _MATMUL, _TANH, _SILU, _SIN, _COS, _EXP,
              _SUM, _MEAN, _CONCAT, _GETITEM, _RESHAPE)
)


def _apply(prim: Primitive, *inputs: Tensor, **attrs: Any) -> Tensor:
    ctx = _Context(tuple(t.data for t in inputs), attrs)
    ctx.output = prim.forward(ctx, *ctx.inputs)

    tangent = None
    if any(t.tangent is not None for t in inputs):
        tangent = prim.jvp(ctx, *(t.tangent for t in inputs))
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=ctx.output.dtype)

    out = Tensor(ctx.output, tangent=tangent)
    for tape in _tape_stack():
        tape._record(prim, inputs, out, ctx)
    return out


# ==================== 函数式接口 ====================


def tanh(x: Tensor) -> Tensor:
    return _apply(_TANH, _as_tensor(x))


def silu(x: Tensor) -> Tensor:
    return _apply(_SILU, _as_tensor(x))


def sin(x: Tensor) -> Tensor:
    return _apply(_SIN, _as_tensor(x))


def cos(x: Tensor) -> Tensor:
    return _apply(_COS, _as_tensor(x))


def exp(x: Tensor) -> Tensor:
    return _apply(_EXP, _as_tensor(x))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    items = [_as_tensor(t) for t in tensors]
    return _apply(_CONCAT, *items, axis=axis)


Tensor._UFUNC_MAP.update({
    "add": lambda a, b: _as_tensor(a) + b,
    "subtract": lambda a, b: _as_tensor(a) - b,
    "multiply": lambda a, b: _as_tensor(a) * b,
    "true_divide": lambda a, b: _as_tensor(a) / b,
    "matmul": lambda a, b: _as_tensor(a) @ b,
    "negative": lambda a: -a,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "exp": exp,
})


# ==================== 反向模式 ====================


class _Node:
    __slots__ = ("prim", "inputs", "output", "ctx")

    def __init__(self, prim: Primitive, inputs: Tuple[Tensor, ...], output: Tensor, ctx: _Context):
        self.prim = prim
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


class GradTape:
    """
    梯度记录带

    用法:
        >>> with GradTape() as tape:
        ...     tape.watch(w)
        ...     loss = ((x @ w) * (x @ w)).mean()
        >>> (gw,) = tape.gradient(loss, [w])

    Attributes:
        ops: 按执行顺序记录的运算（天然拓扑序）
        watched: 被追踪的参数引用
        grads: 最近一次 gradient() 累加的梯度（按参数 id 索引）
    """

    def __init__(self):
        self.ops: List[_Node] = []
        self.watched: List[Tensor] = []
        self.grads: Dict[int, np.ndarray] = {}
        self._tracked: set = set()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self.watched.append(t)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def _record(self, prim: Primitive, inputs: Tuple[Tensor, ...], out: Tensor, ctx: _Context) -> None:
        if any(id(t) in self._tracked for t in inputs):
            self.ops.append(_Node(prim, inputs, out, ctx))
            self._tracked.add(id(out))
            out._tape = self

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
        """计算标量 loss 对每个参数的梯度；未出现在记录中的参数梯度为零"""
        if loss.size != 1:
            raise NonScalarLossError(f"loss 必须是标量，实际形状 {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.ops):
            g = grads.get(id(node.output))
            if g is None:
                continue
            input_grads = node.prim.vjp(node.ctx, g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or id(t) not in self._tracked:
                    continue
                gi = _unbroadcast(np.asarray(gi), t.shape)
                prev = grads.get(id(t))
                grads[id(t)] = gi.copy() if prev is None else prev + gi

        result = []
        for p in params:
            g = grads.get(id(p))
            result.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype))
        self.grads = {id(p): g for p, g in zip(params, result)}
        return result


def grad(scalar_loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """
    对 GradTape 上产生的标量 loss 求参数梯度

    Raises:
        NonScalarLossError: loss 不是标量
        MeanFlowError: loss 没有记录在任何 GradTape 上
    """
    if scalar_loss.size != 1:
        raise NonScalarLossError(f"loss 必须是标量，实际形状 {scalar_loss.shape}")
    tape = scalar_loss._tape
    if tape is None:
        raise MeanFlowError("loss 没有记录在 GradTape 上，请在 GradTape 中 watch 参数后再计算")
    return tape.gradient(scalar_loss, params)


@contextmanager
def no_record() -> Iterator[None]:
    """暂停当前线程上所有 GradTape 的记录（用于构造回归目标）"""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


# ==================== 前向模式 ====================


def jvp(
    f: Callable[..., Tensor],
    x: Union[ArrayLike, Sequence[ArrayLike]],
    dx: Union[ArrayLike, Sequence[ArrayLike]],
) -> Tuple[Tensor, Tensor]:
    """
    前向模式雅可比-向量积

    Args:
        f: 仅由受支持原语组成的函数
        x: 输入（单个张量或张量元组）
        dx: 与 x 同形状的切向量

    Returns:
        (f(x), J_f(x)·dx)
    """
    multi = isinstance(x, (tuple, list))
    xs = list(x) if multi else [x]
    dxs = list(dx) if multi else [dx]
    if len(xs) != len(dxs):
        raise ShapeMismatchError("jvp", (len(xs),), (len(dxs),))

    duals = []
    for xi, di in zip(xs, dxs):
        xi = _as_tensor(xi)
        di = di.data if isinstance(di, Tensor) else np.asarray(di, dtype=xi.dtype)
        if di.shape != xi.shape:
            raise ShapeMismatchError("jvp", xi.shape, di.shape)
        duals.append(Tensor(xi.data, tangent=di))

    out = f(*duals)
    if not isinstance(out, Tensor):
        raise UnsupportedPrimitiveError(type(out).__name__)
    tangent = out.tangent if out.tangent is not None else np.zeros_like(out.data)
    return Tensor(out.data), Tensor(tangent)
