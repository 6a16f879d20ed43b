"""
最小反向模式自动微分引擎

- Tensor: numpy 数组 + 梯度
- Tape: 按执行顺序记录算子，backward() 逆序回放一次
- 算子: conv1d / maxpool1d / upsample1d / dense / leaky_relu / sigmoid / softmax / concat / crop，
  以及损失函数需要的逐元素运算与归约
- RMSprop 优化器与有限差分梯度校验
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ConfigError, ShapeError, TrainingError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n 维数组；仅在活动 Tape 中参与求导"""
    __slots__ = ("values", "requires_grad", "grad", "name")
    # 让 ndarray 与 Tensor 混合运算时走 Tensor 的反射运算符
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


TensorLike = Union[Tensor, np.ndarray, float, int]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """
    记录算子的有序列表

    用法:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: Backward) -> None:
        self.nodes.append(TapeNode(op, inputs, output, backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> int:
        """
        逆序回放，把梯度累加到 requires_grad 的张量上

        Returns:
            访问过的节点数
        """
        if grad is None:
            if loss.values.size != 1:
                raise ShapeError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(loss.values)
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ShapeError(f"Seed grad shape {grad.shape} != output shape {loss.shape}")
        loss.grad = grad

        visited = 0
        for node in reversed(self.nodes):
            visited += 1
            g = node.output.grad
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=t.dtype)
                if gi.shape != t.shape:
                    raise ShapeError(f"{node.op}: grad shape {gi.shape} != input shape {t.shape}")
                t.grad = gi if t.grad is None else t.grad + gi
        return visited


def _as_tensor(x: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, inputs: Tuple[Tensor, ...], values: np.ndarray, backward: Backward) -> Tensor:
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# ---------------------------------------------------------------------------
# 逐元素运算与归约
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", (a, b), a.values + b.values, backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", (a, b), a.values - b.values, backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make("mul", (a, b), a.values * b.values, backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.values
        gb = -g * a.values / (b.values * b.values)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", (a, b), a.values / b.values, backward)


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """带下限的自然对数，低于 floor 的位置梯度为零"""
    clipped = np.maximum(x.values, floor)

    def backward(g):
        return (g / clipped * (x.values > floor),)

    return _make("log", (x,), np.log(clipped), backward)


def sum(x: Tensor, axis: Optional[int | Tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    # 64 位累加
    values = np.sum(x.values, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make("sum", (x,), values, backward)


def mean(x: Tensor, axis: Optional[int | Tuple[int, ...]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return div(sum(x, axis=axis, keepdims=keepdims), float(count))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make("reshape", (x,), x.values.reshape(shape), backward)


# ---------------------------------------------------------------------------
# 网络算子
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: str = "same") -> Tensor:
    """
    一维互相关，零填充保持长度

    Args:
        x: [B, Cin, L]
        w: [Cout, Cin, K]，K 为奇数
        b: [Cout]
    """
    if stride != 1 or padding != "same":
        raise ShapeError("conv1d supports stride=1 with same padding only")
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x[B,Cin,L] and w[Cout,Cin,K], got {x.shape} and {w.shape}")
    batch, cin, length = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d channel mismatch: input has {cin}, kernel expects {wcin}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d bias shape {b.shape} != ({cout},)")
    if length == 0:
        raise ShapeError("conv1d on empty input")

    pad = k // 2
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad)))
    # im2col: [B, L, Cin*K]
    cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(batch * length, cin * k)
    w2 = w.values.reshape(cout, cin * k)
    out = (cols @ w2.T).reshape(batch, length, cout).transpose(0, 2, 1)
    if b is not None:
        out = out + b.values[None, :, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * length, cout)
        dw = (g2.T @ cols).reshape(cout, cin, k)
        dcols = (g2 @ w2).reshape(batch, length, cin, k)
        dxp = np.zeros((batch, cin, length + 2 * pad), dtype=x.dtype)
        for j in range(k):
            dxp[:, :, j:j + length] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxp[:, :, pad:pad + length]
        db = None if b is None else np.sum(g, axis=(0, 2), dtype=np.float64)
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv1d", inputs, out, backward)


def maxpool1d(x: Tensor, window: int = 2) -> Tuple[Tensor, np.ndarray]:
    """
    一维最大池化；长度不能整除时复制末尾样本补齐，平局取最小下标

    Returns:
        (池化结果, 每个窗口最大值在输入中的下标)
    """
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects [B,C,L], got {x.shape}")
    if window < 1:
        raise ConfigError(f"maxpool1d window must be >= 1, got {window}")
    batch, channels, length = x.shape
    if length == 0 or batch == 0 or channels == 0:
        raise ShapeError("maxpool1d on empty input")
    extra = (-length) % window
    xp = np.pad(x.values, ((0, 0), (0, 0), (0, extra)), mode="edge") if extra else x.values
    pooled_len = xp.shape[2] // window
    blocks = xp.reshape(batch, channels, pooled_len, window)
    local = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    indices = local + np.arange(pooled_len)[None, None, :] * window

    def backward(g):
        dxp = np.zeros((batch, channels, pooled_len, window), dtype=x.dtype)
        np.put_along_axis(dxp, local[..., None], g[..., None], axis=-1)
        dxp = dxp.reshape(batch, channels, pooled_len * window)
        dx = dxp[:, :, :length].copy()
        if extra:
            dx[:, :, length - 1] += dxp[:, :, length:].sum(axis=-1)
        return (dx,)

    # 补齐位置的下标回指到最后一个真实样本
    indices = np.minimum(indices, length - 1)
    return _make("maxpool1d", (x,), out, backward), indices


def upsample1d(x: Tensor, factor: int = 2) -> Tensor:
    """最近邻上采样"""
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsample1d factor must be a positive integer, got {factor}")
    if x.ndim != 3:
        raise ShapeError(f"upsample1d expects [B,C,L], got {x.shape}")
    factor = int(factor)
    batch, channels, length = x.shape

    def backward(g):
        return (g.reshape(batch, channels, length, factor).sum(axis=-1),)

    return _make("upsample1d", (x,), np.repeat(x.values, factor, axis=2), backward)


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """全连接层：x[B,F] @ w[F,F'] + b[F']"""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shape mismatch: x{x.shape} w{w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    out = x.values @ w.values
    if b is not None:
        out = out + b.values[None, :]

    def backward(g):
        db = None if b is None else np.sum(g, axis=0, dtype=np.float64)
        return g @ w.values.T, x.values.T @ g, db

    inputs = (x, w) if b is None else (x, w, b)
    return _make("dense", inputs, out, backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    positive = x.values > 0
    out = np.where(positive, x.values, slope * x.values)

    def backward(g):
        return (np.where(positive, g, slope * g),)

    return _make("leaky_relu", (x,), out, backward)


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.values)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make("sigmoid", (x,), s, backward)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"Axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    s = special.softmax(x.values, axis=axis)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make("softmax", (x,), s, backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    axis = _check_axis(axis, xs[0].ndim)
    for t in xs[1:]:
        if t.ndim != xs[0].ndim:
            raise ShapeError("concat inputs must share rank")
        for d in range(t.ndim):
            if d != axis and t.shape[d] != xs[0].shape[d]:
                raise ShapeError(f"concat shape mismatch on axis {d}: {t.shape} vs {xs[0].shape}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", tuple(xs), np.concatenate([t.values for t in xs], axis=axis), backward)


def crop(x: Tensor, start: int | Sequence[int] | np.ndarray, length: int, axis: int = -1) -> Tensor:
    """
    沿 axis 截取 [start, start + length)

    start 可以是整数，也可以是逐样本的起点序列（此时 axis 必须是最后一维，第 0 维为 batch）；
    窗口外的梯度为零
    """
    axis = _check_axis(axis, x.ndim)
    size = x.shape[axis]
    length = int(length)
    if length <= 0:
        raise ShapeError(f"crop length must be positive, got {length}")

    if np.ndim(start) == 0:
        start = int(start)
        if start < 0 or start + length > size:
            raise ShapeError(f"crop window [{start}, {start + length}) outside axis of size {size}")
        slicer = [slice(None)] * x.ndim
        slicer[axis] = slice(start, start + length)
        slicer = tuple(slicer)

        def backward(g):
            dx = np.zeros_like(x.values)
            dx[slicer] = g
            return (dx,)

        return _make("crop", (x,), x.values[slicer].copy(), backward)

    starts = np.asarray(start, dtype=np.int64).reshape(-1)
    if axis != x.ndim - 1 or x.ndim < 2:
        raise ShapeError("Per-sample crop needs a batch axis and crops the last axis")
    if starts.shape[0] != x.shape[0]:
        raise ShapeError(f"Got {starts.shape[0]} crop starts for batch of {x.shape[0]}")
    if np.any(starts < 0) or np.any(starts + length > size):
        raise ShapeError(f"Per-sample crop windows outside axis of size {size}")
    idx_shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (length,)
    idx = (starts[:, None] + np.arange(length)[None, :]).reshape(idx_shape)
    out_shape = x.shape[:-1] + (length,)
    idx = np.broadcast_to(idx, out_shape)
    out = np.take_along_axis(x.values, idx, axis=-1)

    def backward(g):
        dx = np.zeros_like(x.values)
        np.put_along_axis(dx, idx, g, axis=-1)
        return (dx,)

    return _make("crop", (x,), out, backward)


# ---------------------------------------------------------------------------
# RMSprop
# ---------------------------------------------------------------------------

@dataclass
class RmsPropState:
    """RMSprop 状态：每个参数一份均方累加器"""
    lr: float = 1e-5
    alpha: float = 0.99
    eps: float = 1e-8
    acc: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def rmsprop_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    state: RmsPropState,
) -> Dict[str, np.ndarray]:
    """
    一步 RMSprop（无动量），原地更新并返回 params

    acc <- alpha * acc + (1 - alpha) * g^2
    p   <- p - lr * g / (sqrt(acc) + eps)
    """
    # 先整体检查，避免部分参数已更新后才发现发散
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"Gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"Non-finite gradient for parameter {name}")

    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        g64 = g.astype(np.float64)
        acc = state.acc.get(name)
        if acc is None:
            acc = np.zeros(g.shape, dtype=np.float64)
        acc *= state.alpha
        acc += (1.0 - state.alpha) * g64 * g64
        state.acc[name] = acc
        step = state.lr * g64 / (np.sqrt(acc) + state.eps)
        params[name] -= step.astype(params[name].dtype)
    state.steps += 1
    return params


class RmsProp:
    """对一组命名 Tensor 参数做 RMSprop 更新"""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-5, alpha: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.state = RmsPropState(lr=lr, alpha=alpha, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {name: p.values for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items()}
        rmsprop_step(arrays, grads, self.state)


# ---------------------------------------------------------------------------
# 梯度校验
# ---------------------------------------------------------------------------

def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """
    用中心差分校验 fn 对每个输入的解析梯度

    输出经固定随机投影化为标量；返回各输入中最大的相对误差
    ||g_analytic - g_numeric|| / (||g_analytic|| + ||g_numeric||)
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with Tape() as tape:
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    tape.backward(out, grad=proj)

    def objective() -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).values * proj))

    worst = 0.0
    for t, a in zip(tensors, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        numeric = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            f_plus = objective()
            a[idx] = orig - h
            f_minus = objective()
            a[idx] = orig
            numeric[idx] = (f_plus - f_minus) / (2.0 * h)
        scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
