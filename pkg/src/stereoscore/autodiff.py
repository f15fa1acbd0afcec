"""
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Only the operations needed by the multi-score network are provided:
conv2d, maxpool2d, fully_connected, relu, concat, flatten/reshape,
l1_loss, plus scalar scaling, addition and summation for composing losses.

Every op checks its output for NaN/Inf and raises ``NonFiniteError``
instead of letting non-finite values propagate.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NonFiniteError, OptimizerStateError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread (inference only)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense array plus the bookkeeping needed for backpropagation.

    Leaf tensors (created directly) accumulate into ``grad`` on backward.
    Tensors produced by ops keep a closure mapping the upstream gradient to
    the gradients of their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, factor: float) -> "Tensor":
        return scale(self, factor)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        backward(self)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out._op = op
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss.

    Gradients of leaf tensors with ``requires_grad`` are accumulated into
    ``.grad``. The graph is consumed: a second call raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        return g, g

    return _make(a.data + b.data, (a, b), _bw, "add")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)

    def _bw(g):
        return (g * f,)

    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data * f
    return _make(data, (a,), _bw, "scale")


def tensor_sum(a: Tensor) -> Tensor:
    def _bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), _bw, "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, x.data.dtype.type(0)), (x,), _bw, "relu")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape

    def _bw(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), _bw, "reshape")


def flatten(x: Tensor) -> Tensor:
    """[N, C, H, W] (or any rank >= 2) -> [N, C*H*W], row-major."""
    if x.ndim < 2:
        raise DimensionError(f"flatten: need rank >= 2, got shape {x.shape}")
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise DimensionError("concat: empty input list")
    ref = inputs[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(inputs[1:], start=1):
        if len(t.shape) != len(ref):
            raise DimensionError(f"concat: input {i} has rank {len(t.shape)}, expected {len(ref)}")
        for d in range(len(ref)):
            if d != ax and t.shape[d] != ref[d]:
                raise DimensionError(
                    f"concat: input {i} has size {t.shape[d]} on axis {d}, expected {ref[d]}"
                )
    sizes = [t.shape[ax] for t in inputs]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in inputs], axis=ax), inputs, _bw, "concat")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x [N, D_in] @ weight[D_out, D_in].T + bias[D_out]."""
    if x.ndim != 2:
        raise DimensionError(f"fully_connected: input must be [N, D_in], got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"fully_connected: axis 1 mismatch, input has D_in={x.shape[1]}, weight is {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data

    def _bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(xd @ wd.T + bias.data, (x, weight, bias), _bw, "fully_connected")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Unroll [N, C, H, W] into rows of [N*H'*W', k*k*C].

    Columns are ordered (kernel row, kernel col, channel); the image is
    moved to channels-last first so each copied slice is channel-contiguous.
    """
    n, c, h, w = x.shape
    xh = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xh[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c), ho, wo


def col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add column gradients back to an [N, C, H, W] image."""
    n, c, h, w = x_shape
    d = dcols.reshape(n, ho, wo, k, k, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    return np.ascontiguousarray(out[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and a single matrix product."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be [N, C, H, W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [C_out, C_in, k, k], got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw} on axes 2/3")
    if x.shape[1] != c_in:
        raise DimensionError(f"conv2d: channel axis 1 mismatch, input has {x.shape[1]}, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    for axis in (2, 3):
        if x.shape[axis] + 2 * padding < kh:
            raise DimensionError(
                f"conv2d: spatial axis {axis} of size {x.shape[axis]} (+2*{padding} padding) smaller than kernel {kh}"
            )
    k = kh
    n = x.shape[0]
    cols, ho, wo = im2col(x.data, k, stride, padding)
    # weight matrix in (kernel row, kernel col, channel) column order to match im2col
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    x_shape = x.shape

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = col2im(gm @ wmat, x_shape, k, stride, padding, ho, wo) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2))
        gb = gm.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), _bw, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in scan order."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    for axis, size in ((2, h), (3, w)):
        if size % 2:
            raise DimensionError(f"maxpool2d: axis {axis} has odd size {size}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), _bw, "maxpool2d")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over the batch; gradient sign(pred - target) / N."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: pred shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target.data
    n = pred.shape[0] if pred.ndim else 1
    sgn = np.sign(diff)

    def _bw(g):
        base = sgn * (g / n)
        return base, -base

    value = np.abs(diff).sum(dtype=np.float64) / n
    return _make(np.asarray(value, dtype=pred.dtype), (pred, target), _bw, "l1_loss")


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class Parameter:
    """A named trainable tensor with its momentum buffer."""

    __slots__ = ("name", "tensor", "velocity")

    def __init__(self, name: str, data: np.ndarray):
        if not name:
            raise ValueError("parameter name must be nonempty")
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.velocity = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be a positive integer, got {self.batch_size}")


def sgd_step(params: Iterable[Parameter], config: SgdConfig) -> None:
    """v <- momentum*v + grad + weight_decay*w;  w <- w - lr*v;  grad <- 0."""
    params = list(params)
    for p in params:
        if p.tensor.grad is None:
            raise OptimizerStateError(f"parameter {p.name!r} has no gradient; run backward first")
    dt = DEFAULT_DTYPE
    mom, wd, lr = dt(config.momentum), dt(config.weight_decay), dt(config.learning_rate)
    for p in params:
        w = p.tensor.data
        v = p.velocity
        v *= mom
        v += p.tensor.grad
        if wd:
            v += wd * w
        w -= lr * v
        _check_finite(w, f"sgd_step[{p.name}]")
        p.tensor.grad.fill(0)
