"""Dense tensors with reverse-mode automatic differentiation.

Every operation below takes ``Tensor`` inputs backed by a numpy array, computes
the forward value eagerly and, when any input requires a gradient, records a
node holding its parents and an adjoint rule. ``backward`` walks the recorded
nodes once in reverse topological order and accumulates ``grad`` on leaves.

All operations accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import contextlib
import math
import threading
import zlib
from typing import Any, Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ConfigError, LabelError, ShapeError

# ---------------------------------------------------------------------------
# Precision mode and graph recording switch
# ---------------------------------------------------------------------------

_DTYPES: dict[int, type[np.floating]] = {32: np.float32, 64: np.float64}
_dtype: type[np.floating] = np.float32
# Per-thread recording switch, toggled by no_grad().
_recording = threading.local()


def set_precision(bits: int) -> None:
    """Switch the global floating-point width (32 for training, 64 for checks)."""
    global _dtype
    if bits not in _DTYPES:
        raise ConfigError(f"unsupported precision {bits}; expected 32 or 64")
    _dtype = _DTYPES[bits]


def get_dtype() -> type[np.floating]:
    return _dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = _dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(32 if previous is np.float32 else 64)


def grad_enabled() -> bool:
    return getattr(_recording, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations without recording graph nodes."""
    previous = grad_enabled()
    _recording.enabled = False
    try:
        yield
    finally:
        _recording.enabled = previous


# ---------------------------------------------------------------------------
# Random number generation
# ---------------------------------------------------------------------------


class Rng:
    """Named, splittable, seedable generator.

    ``split(name)`` derives an independent child stream from the parent's seed
    and the path of names leading to it, so a stream only depends on
    ``(seed, path)`` and never on how many draws other streams made.
    """

    def __init__(self, seed: int, *, _key: tuple[int, ...] = (), _path: str = "root"):
        self.seed = int(seed)
        self.key = _key
        self.path = _path
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def split(self, name: str | int) -> "Rng":
        label = str(name)
        return Rng(
            self.seed,
            _key=self.key + (zlib.crc32(label.encode("utf-8")),),
            _path=f"{self.path}/{label}",
        )

    # Thin delegation so callers never reach for a global generator.
    def uniform(self, low: float = 0.0, high: float = 1.0, size: Any = None) -> Any:
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: Any = None) -> Any:
        return self.generator.normal(loc, scale, size)

    def random(self, size: Any = None) -> Any:
        return self.generator.random(size)

    def integers(self, low: int, high: int | None = None, size: Any = None) -> Any:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict[str, Any]:
        return self.generator.bit_generator.state

    def set_state(self, state: dict[str, Any]) -> None:
        self.generator.bit_generator.state = state

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Numpy-backed array that can take part in a recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Backward | None = None,
    ):
        array = np.asarray(data)
        if array.dtype != _dtype:
            array = array.astype(_dtype)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __truediv__(self, other: float) -> "Tensor":
        return mul(self, 1.0 / other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: Any, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Backward) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting added to reach ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """Recorded operations reachable from ``output``, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = self._toposort(output)

    @staticmethod
    def _toposort(output: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        output = self.output
        if output.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {output.shape}")
        pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Graph(loss).backward()


# ---------------------------------------------------------------------------
# Elementwise and reduction operations
# ---------------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def reduce_sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), _backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return _result(
        np.swapaxes(x.data, axis1, axis2),
        (x,),
        lambda g: (np.swapaxes(g, axis1, axis2),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("cannot concatenate", *(t.shape for t in tensors)) from exc
    return _result(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def gather(x: Tensor, index: Any) -> Tensor:
    """Advanced indexing on the leading axes (embedding lookup, row selection)."""

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    try:
        data = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"index out of range for tensor: {exc}", x.shape) from exc
    return _result(np.array(data), (x,), _backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions disagree", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("matmul batch dimensions disagree", a.shape, b.shape) from exc

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(data, (a, b), _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear input width disagrees with weight", x.shape, weight.shape)
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error gate, tanh form. gelu(0) == 0."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner),)

    return _result(0.5 * v * (1.0 + t), (x,), _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.data
    centered = v - v.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * rstd

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_normed = g * gamma.data
        grad_x = rstd * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(g * normed, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(normed * gamma.data + beta.data, (x, gamma, beta), _backward)


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get probability 0.

    The row maximum is taken over kept entries only, so values at masked
    positions never influence the result.
    """
    v = x.data
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _result(probs, (x,), _backward)


def softmax(x: Tensor) -> Tensor:
    return masked_softmax(x, None)


def causal_mask(length: int) -> np.ndarray:
    """``mask[t, j]`` is True when position t may attend to position j."""
    return np.tril(np.ones((length, length), dtype=bool))


def softmax_cross_entropy(logits: Tensor, target: int | np.ndarray) -> Tensor:
    """``-log softmax(logits)[target]`` over the last axis.

    ``logits`` of shape ``[C]`` with an int target gives a scalar; ``[..., C]``
    with an integer array of shape ``[...]`` gives one loss per row.
    """
    logits = as_tensor(logits)
    n_classes = logits.shape[-1]
    if n_classes < 2:
        raise ShapeError("cross-entropy needs at least 2 classes", logits.shape)
    targets = np.asarray(target, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("target shape disagrees with logits", targets.shape, logits.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise LabelError(f"target {targets.tolist()} out of range for {n_classes} classes")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_probs)
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (grad * np.asarray(g)[..., None],)

    return _result(-picked, (logits,), _backward)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot_uniform(rng: Rng, shape: tuple[int, int], name: str) -> Tensor:
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=shape), name)


def zeros(shape: tuple[int, ...], name: str) -> Tensor:
    return parameter(np.zeros(shape), name)


def ones(shape: tuple[int, ...], name: str) -> Tensor:
    return parameter(np.ones(shape), name)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    *,
    coords: Iterable[int] | None = None,
    floor: float = 1e-2,
) -> float:
    """Largest relative gap between the analytic and central-difference gradient.

    ``f`` must be deterministic; it is evaluated at ``x`` perturbed in place one
    coordinate at a time. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``, so coordinates whose gradient is near
    zero are compared on an absolute scale of ``floor``.
    """
    if not x.requires_grad:
        raise ContractError("grad_check needs a tensor that requires grad")
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    flat_analytic = analytic.reshape(-1)

    worst = 0.0
    with no_grad():
        for j in range(flat.size) if coords is None else coords:
            original = flat[j]
            flat[j] = original + eps
            upper = f(x).item()
            flat[j] = original - eps
            lower = f(x).item()
            flat[j] = original
            numeric = (upper - lower) / (2.0 * eps)
            exact = float(flat_analytic[j])
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
    return worst
