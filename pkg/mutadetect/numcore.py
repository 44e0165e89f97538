"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records one node on the current thread's tape:
the output tensor, its inputs, and a vector-Jacobian closure over the saved
activations. `backward` walks the tape once in reverse and accumulates
gradients into leaf tensors. Values are stored as float64 numpy arrays.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
from scipy.special import expit

from mutadetect.errors import (
    ContractError,
    DimensionError,
    DomainError,
)
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()

ArrayLike = Any
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An n-dimensional float64 array with an optional gradient."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_node")

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return take(self, index)


@dataclass
class _Node:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: VJP


class Tape:
    """Ordered record of differentiable operations for one worker."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self.enabled = True

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], vjp: VJP) -> None:
        node = _Node(output, inputs, vjp)
        output._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    """Return the calling thread's tape, creating it on first use."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on the current thread's tape."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(values: np.ndarray, inputs: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    out = Tensor(values)
    tape = current_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# --- Elementwise arithmetic ---


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.values == 0):
        raise DomainError("div: division by zero")
    av, bv = a.values, b.values
    return _result(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, (a,), lambda g: (-g,))


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.values == 0):
        raise DomainError("reciprocal: zero entry")
    out = 1.0 / a.values
    return _result(out, (a,), lambda g: (-g * out * out,))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _result(av * av, (a,), lambda g: (2.0 * g * av,))


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip entries to [lo, hi]; clipped entries pass no gradient."""
    av = a.values
    lower = -np.inf if lo is None else lo
    upper = np.inf if hi is None else hi
    inside = (av >= lower) & (av <= upper)
    return _result(np.clip(av, lower, upper), (a,), lambda g: (g * inside,))


# --- Nonlinearities ---


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.values)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    active = a.values > 0
    return _result(np.where(active, a.values, 0.0), (a,), lambda g: (g * active,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise DomainError(f"log: non-positive entry (min {a.values.min():.3g})")
    av = a.values
    return _result(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0):
        raise DomainError(f"sqrt: negative entry (min {a.values.min():.3g})")
    out = np.sqrt(a.values)
    return _result(out, (a,), lambda g: (g / (2.0 * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), vjp)


def dropout(
    a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool
) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise DomainError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.values * mask, (a,), lambda g: (g * mask,))


# --- Reductions ---


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis: Any, keepdims: bool):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.values.sum(axis=axis, keepdims=keepdims)
    return _result(out, (a,), lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.values.size if axis is None else shape[axis]
    out = a.values.mean(axis=axis, keepdims=keepdims)
    return _result(
        out, (a,), lambda g: (_expand(g / count, shape, axis, keepdims).copy(),)
    )


def sq_norm(a: Tensor, axis: Optional[int] = -1) -> Tensor:
    """Sum of squares along `axis` (all entries when axis is None)."""
    av = a.values
    shape = a.shape
    out = (av * av).sum(axis=axis)
    return _result(
        out, (a,), lambda g: (2.0 * av * _expand(g, shape, axis, False),)
    )


# --- Shape and linear algebra ---


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _result(av @ bv, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got {a.shape}")
    return _result(
        np.swapaxes(a.values, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}") from e
    return _result(out, (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat: incompatible shapes {shapes}") from e
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.values for t in tensors], axis=axis)
    except ValueError as e:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"stack: incompatible shapes {shapes}") from e
    count = len(tensors)
    return _result(
        out,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)),
    )


def take(a: Tensor, index: Any) -> Tensor:
    """Basic/advanced indexing with a scatter-add gradient."""
    shape = a.shape

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.values[index], (a,), vjp)


# --- Differentiation ---


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate `.grad` of every leaf tensor that `loss` depends on.

    The tape is cleared afterwards.

    Raises:
        ContractError: If `loss` is not a scalar produced through the tape.
    """
    tape = tape or current_tape()
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or not tape.nodes:
        raise ContractError("loss was not produced through the tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, input_grad in zip(node.inputs, node.vjp(g)):
            if input_grad is None or not tensor.requires_grad:
                continue
            input_grad = _unbroadcast(np.asarray(input_grad), tensor.shape)
            if tensor.is_leaf:
                if tensor.grad is None:
                    tensor.grad = np.array(input_grad, dtype=np.float64)
                else:
                    tensor.grad = tensor.grad + input_grad
            else:
                key = id(tensor)
                grads[key] = grads[key] + input_grad if key in grads else input_grad
    tape.clear()


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-4,
    coords: Optional[Iterable[int]] = None,
    analytic_offset: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error at coordinate i is |a_i - fd_i| / max(1, |a_i|). `point` is
    perturbed in place and restored. `analytic_offset` is added to the
    analytic gradient; it exists so a corrupted gradient can be shown to fail.

    Raises:
        DomainError: If eps is zero.
        ContractError: If f is not scalar-valued.
    """
    if eps == 0:
        raise DomainError("eps must be non-zero: the difference quotient divides by 2*eps")

    tape = current_tape()
    tape.clear()
    was_trainable = point.requires_grad
    point.requires_grad = True
    point.grad = None
    try:
        out = f(point)
        if out.values.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got {out.shape}")
        if out.requires_grad:
            backward(out)
        analytic = (
            np.zeros_like(point.values) if point.grad is None else point.grad.copy()
        )
        analytic = analytic.reshape(-1) + analytic_offset
    finally:
        point.grad = None
        tape.clear()

    flat = point.values.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        try:
            for i in indices:
                original = flat[i]
                flat[i] = original + eps
                upper = f(point).item()
                flat[i] = original - eps
                lower = f(point).item()
                flat[i] = original
                numeric = (upper - lower) / (2.0 * eps)
                error = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
                worst = max(worst, error)
        finally:
            point.requires_grad = was_trainable
    return worst


# --- Optimisation ---


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain gradient descent: p <- p - lr * grad(p), then clear grads.

    Raises:
        ContractError: If a parameter has no gradient.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(
                f"parameter {p.name or repr(p)} has no gradient; run backward first"
            )
    for p in params:
        p.values -= lr * p.grad
        p.grad = None


def init_uniform(
    shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, name: str
) -> Tensor:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) trainable tensor."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def tensors_to_dict(named: Mapping[str, Tensor]) -> Dict[str, Dict[str, Any]]:
    """Named tensors as JSON-ready {name: {shape, values}}; floats round-trip exactly."""
    return {
        name: {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}
        for name, t in named.items()
    }


def tensors_from_dict(
    data: Mapping[str, Mapping[str, Any]], requires_grad: bool = False
) -> Dict[str, Tensor]:
    tensors: Dict[str, Tensor] = {}
    for name, record in data.items():
        values = np.asarray(record["values"], dtype=np.float64)
        shape = tuple(int(n) for n in record["shape"])
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise DimensionError(
                f"tensor {name}: {values.size} values do not fill shape {shape}"
            )
        tensors[name] = Tensor(values.reshape(shape), requires_grad=requires_grad, name=name)
    return tensors
