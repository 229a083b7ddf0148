"""
Tensor Module
Dense tensors with a minimal reverse-mode gradient tape and the Adam optimizer.

Only the primitives needed by the vision and audio networks are provided.
Primitives record themselves on the tape that is active in the current thread
(see ``Tape.__enter__``) whenever one of their inputs requires a gradient.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from modules.error_handler import ShapeError, TapeError

logger = logging.getLogger(__name__)

_tensor_ids = itertools.count(1)
_local = threading.local()
_default_dtype = np.dtype(np.float32)


def get_dtype() -> np.dtype:
    """Current default floating point precision"""
    return _default_dtype


def set_dtype(dtype) -> None:
    """Switch the default precision (float32 for training, float64 for checks)"""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision: {dtype}")
    _default_dtype = dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily run with another default precision"""
    previous = _default_dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


class Tensor:
    """Contiguous real array with an identity on the tape"""

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        if any(dim < 1 for dim in array.shape):
            raise ShapeError(f"Tensor dimensions must be >= 1, got {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.id = next(_tensor_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} grad={self.requires_grad}>"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)


ArrayLike = Union[Tensor, np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    op: str
    inputs: List[Tensor]
    output_id: int
    backward: BackwardFn


class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation"""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tapes.pop()
        return False

    def record(self, op: str, inputs: List[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("Cannot record on a tape after backward; call reset() first")
        self.nodes.append(TapeNode(op, inputs, output.id, backward))

    def reset(self) -> None:
        self.nodes.clear()
        self.gradients = {}
        self._consumed = False

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Accumulate gradients of a scalar loss into ``self.gradients``"""
        if self._consumed:
            raise TapeError("backward already called on this tape; reset() it first")
        if loss.size != 1:
            raise TapeError(f"Loss must be a scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("Loss was not produced on the tape")

        grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = grads.get(node.output_id)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {grad.shape} != input shape {tensor.shape}"
                    )
                if tensor.id in grads:
                    grads[tensor.id] = grads[tensor.id] + grad
                else:
                    grads[tensor.id] = grad

        self.gradients = grads
        self._consumed = True
        return grads

    def grad(self, tensor: Tensor) -> Optional[np.ndarray]:
        return self.gradients.get(tensor.id)


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def record_op(op: str, inputs: Sequence[Tensor], output_data: np.ndarray,
              backward: BackwardFn) -> Tensor:
    """Wrap a primitive's result and register it on the active tape"""
    inputs = list(inputs)
    needs_grad = any(t.requires_grad for t in inputs)
    output = Tensor(output_data, requires_grad=needs_grad, dtype=output_data.dtype)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(op, inputs, output, backward)
    return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record_op("add", [a, b], out,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record_op("sub", [a, b], out,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return record_op("mul", [a, b], out,
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", [x], x.data * mask, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record_op("sigmoid", [x], s, lambda g: (g * s * (1.0 - s),))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return record_op("abs", [x], np.abs(x.data), lambda g: (g * sign,))


def sum_(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return record_op("sum", [x], out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.sum() / n, dtype=x.data.dtype)
    return record_op("mean", [x], out, lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def stack_mean(values: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors (batch reduction)"""
    if not values:
        raise ShapeError("stack_mean needs at least one value")
    total = values[0]
    for value in values[1:]:
        total = add(total, value)
    return mul(total, 1.0 / len(values))


# -- shape -------------------------------------------------------------------

def take_row(x: Tensor, index: int) -> Tensor:
    """Row ``index`` of a 2-D tensor"""
    if x.ndim != 2 or not 0 <= index < x.shape[0]:
        raise ShapeError(f"take_row({index}) on shape {x.shape}")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return record_op("take_row", [x], x.data[index].copy(), backward)


def pad_time(x: Tensor, length: int) -> Tensor:
    """Zero-pad a [C, T] tensor on the right up to ``length`` samples"""
    extra = length - x.shape[1]
    if extra < 0:
        raise ShapeError(f"Cannot pad length {x.shape[1]} down to {length}")
    if extra == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, extra)))
    return record_op("pad_time", [x], out, lambda g: (g[:, :x.shape[1]].copy(),))


def trim_time(x: Tensor, length: int) -> Tensor:
    """Keep the first ``length`` samples of a [C, T] tensor"""
    if length > x.shape[1]:
        raise ShapeError(f"Cannot trim length {x.shape[1]} to {length}")
    if length == x.shape[1]:
        return x

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[:, :length] = g
        return (grad,)

    return record_op("trim_time", [x], x.data[:, :length].copy(), backward)


# -- linear algebra ----------------------------------------------------------

def matvec(w: Tensor, v: Tensor) -> Tensor:
    """[C, K] x [K] -> [C]; used for the conditioning projections"""
    if w.ndim != 2 or v.ndim != 1 or w.shape[1] != v.shape[0]:
        raise ShapeError(f"matvec shape mismatch: {w.shape} x {v.shape}")
    return record_op("matvec", [w, v], w.data @ v.data,
                     lambda g: (np.outer(g, v.data), w.data.T @ g))


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1) -> Tensor:
    """Cross-correlation over time without padding.

    x: [C_in, T], weight: [C_out, C_in, K], bias: [C_out] -> [C_out, (T-K)//stride + 1]
    """
    if x.ndim != 2 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects [C,T] input and [O,C,K] weight, got {x.shape}, {weight.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv1d: weight expects {c_in} input channels, input has {x.shape[0]}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    if x.shape[1] < k:
        raise ShapeError(f"conv1d: input length {x.shape[1]} shorter than kernel {k}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.shape} != ({c_out},)")

    length = x.shape[1]
    windows = sliding_window_view(x.data, k, axis=1)[:, ::stride, :]
    out_len = windows.shape[1]
    out = np.tensordot(weight.data, windows, axes=([1, 2], [0, 2]))
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([1], [1]))
        grad_x = np.zeros((c_in, length), dtype=g.dtype)
        span = stride * (out_len - 1) + 1
        for tap in range(k):
            grad_x[:, tap:tap + span:stride] += weight.data[:, :, tap].T @ g
        grad_b = g.sum(axis=1) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record_op("conv1d", inputs, np.ascontiguousarray(out), backward)


def conv1d_transpose(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1) -> Tensor:
    """Adjoint of conv1d.

    x: [C_in, T], weight: [C_in, C_out, K], bias: [C_out] -> [C_out, (T-1)*stride + K]
    """
    if x.ndim != 2 or weight.ndim != 3:
        raise ShapeError(f"conv1d_transpose expects [C,T] input and [C,O,K] weight, got {x.shape}, {weight.shape}")
    c_in, c_out, k = weight.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv1d_transpose: weight expects {c_in} input channels, input has {x.shape[0]}")
    if stride < 1:
        raise ShapeError(f"conv1d_transpose: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d_transpose: bias shape {bias.shape} != ({c_out},)")

    length = x.shape[1]
    out_len = (length - 1) * stride + k
    span = stride * (length - 1) + 1
    out = np.zeros((c_out, out_len), dtype=x.data.dtype)
    for tap in range(k):
        out[:, tap:tap + span:stride] += weight.data[:, :, tap].T @ x.data
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        windows = sliding_window_view(g, k, axis=1)[:, ::stride, :]
        grad_x = np.tensordot(weight.data, windows, axes=([1, 2], [0, 2]))
        grad_w = np.tensordot(x.data, windows, axes=([1], [1]))
        grad_b = g.sum(axis=1) if bias is not None else None
        return np.ascontiguousarray(grad_x), grad_w, grad_b

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record_op("conv1d_transpose", inputs, out, backward)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the channel axis: first half * sigmoid(second half)"""
    if x.shape[0] % 2:
        raise ShapeError(f"glu needs an even channel count, got {x.shape[0]}")
    half = x.shape[0] // 2
    a, b = x.data[:half], x.data[half:]
    gate = expit(b)

    def backward(g):
        return (np.concatenate([g * gate, g * a * gate * (1.0 - gate)], axis=0),)

    return record_op("glu", [x], a * gate, backward)


# -- parameters and optimizer --------------------------------------------------

def uniform_param(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                  name: Optional[str] = None) -> Tensor:
    """Parameter drawn from U(-sqrt(1/fan_in), sqrt(1/fan_in))"""
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; parameters without a gradient see a zero gradient"""
    if state.step < 0:
        raise ValueError(f"Adam step must be >= 0, got {state.step}")
    # all checks run before the first write so a failed call leaves state untouched
    for name, param in params.items():
        grad = grads.get(name)
        if grad is not None and grad.shape != param.shape:
            raise ShapeError(f"Adam: gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        for moments in (state.m, state.v):
            moment = moments.get(name)
            if moment is not None and moment.shape != param.shape:
                raise ShapeError(f"Adam: moment for {name} has shape {moment.shape}, parameter {param.shape}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step

    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.data.dtype)
        state.m[name] = m.astype(param.data.dtype)
        state.v[name] = v.astype(param.data.dtype)

    return params, state
