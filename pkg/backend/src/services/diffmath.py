"""Reverse-mode differentiable kernels over numpy / scipy.sparse.

Every kernel computes its forward value eagerly and, when a ``Tape`` is
active in the current context, records a closure that adds its adjoint into
the inputs' ``grad`` buffers. Without an active tape the kernels run in
inference mode and record nothing.
"""

import contextvars
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

from services.errors import DataError, NumericError, UsageError

logger = logging.getLogger(__name__)

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class DiffValue:
    """A float64 tensor with a same-shape gradient buffer."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"DiffValue{label}(shape={self.value.shape})"


class Tape:
    """Ordered record of executed kernels, replayed once in reverse."""

    def __init__(self):
        self._backward_fns: List[Callable[[], None]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._backward_fns)

    def record(self, backward_fn: Callable[[], None]) -> None:
        if self._consumed:
            raise UsageError("Cannot record on a tape that was already consumed")
        self._backward_fns.append(backward_fn)

    def backward(self, loss: DiffValue) -> None:
        if self._consumed:
            raise UsageError("Tape already consumed by a backward pass")
        if loss.value.size != 1:
            raise DataError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.value).all():
            raise NumericError(f"Non-finite loss: {float(loss.value)}")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for backward_fn in reversed(self._backward_fns):
            backward_fn()
        self._backward_fns.clear()


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _record(backward_fn: Callable[[], None]) -> None:
    tape = _active_tape.get()
    if tape is not None:
        tape.record(backward_fn)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def const(value) -> DiffValue:
    return DiffValue(value)


# --- sparse traversal kernels -------------------------------------------------

def sp_apply(matrix, v: DiffValue) -> DiffValue:
    """M · v for a (sparse) matrix M; adjoint Mᵀ · g."""
    if v.value.ndim != 1 or matrix.shape[1] != v.value.shape[0]:
        raise DataError(f"sp_apply: matrix {matrix.shape} incompatible with vector {v.shape}")
    out = DiffValue(np.asarray(matrix @ v.value, dtype=np.float64).ravel())

    def backward():
        v.grad += np.asarray(matrix.T @ out.grad).ravel()

    _record(backward)
    return out


def sp_apply_transpose(matrix, v: DiffValue) -> DiffValue:
    """Mᵀ · v for a (sparse) matrix M; adjoint M · g."""
    if v.value.ndim != 1 or matrix.shape[0] != v.value.shape[0]:
        raise DataError(f"sp_apply_transpose: matrix {matrix.shape} incompatible with vector {v.shape}")
    out = DiffValue(np.asarray(matrix.T @ v.value, dtype=np.float64).ravel())

    def backward():
        v.grad += np.asarray(matrix @ out.grad).ravel()

    _record(backward)
    return out


# --- elementwise kernels ------------------------------------------------------

def hadamard(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.shape != b.shape:
        raise DataError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    out = DiffValue(a.value * b.value)

    def backward():
        a.grad += out.grad * b.value
        b.grad += out.grad * a.value

    _record(backward)
    return out


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    out = DiffValue(a.value + b.value)

    def backward():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad += _unbroadcast(out.grad, b.shape)

    _record(backward)
    return out


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    out = DiffValue(a.value - b.value)

    def backward():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad -= _unbroadcast(out.grad, b.shape)

    _record(backward)
    return out


def scale(a: DiffValue, factor: float) -> DiffValue:
    out = DiffValue(a.value * factor)

    def backward():
        a.grad += out.grad * factor

    _record(backward)
    return out


def tanh(a: DiffValue) -> DiffValue:
    out = DiffValue(np.tanh(a.value))

    def backward():
        a.grad += out.grad * (1.0 - out.value ** 2)

    _record(backward)
    return out


def sigmoid(a: DiffValue) -> DiffValue:
    out = DiffValue(expit(a.value))

    def backward():
        a.grad += out.grad * out.value * (1.0 - out.value)

    _record(backward)
    return out


def softmax(v: DiffValue) -> DiffValue:
    """Max-shifted softmax over the last axis."""
    if not np.isfinite(v.value).all():
        raise NumericError("softmax: non-finite input")
    shifted = v.value - v.value.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = DiffValue(exp / exp.sum(axis=-1, keepdims=True))

    def backward():
        y = out.value
        inner = (out.grad * y).sum(axis=-1, keepdims=True)
        v.grad += y * (out.grad - inner)

    _record(backward)
    return out


def normalize_eps(v: DiffValue, eps: float) -> DiffValue:
    """v / (‖v‖₂ + eps); the zero vector maps to zero with zero gradient."""
    if eps <= 0:
        raise UsageError(f"normalize_eps needs eps > 0, got {eps}")
    norm = float(np.linalg.norm(v.value))
    if not np.isfinite(norm):
        raise NumericError("normalize_eps: non-finite input")
    if norm == 0.0:
        return DiffValue(np.zeros_like(v.value))
    denom = norm + eps
    out = DiffValue(v.value / denom)

    def backward():
        g = out.grad
        v.grad += g / denom - v.value * (float(v.value @ g) / (norm * denom ** 2))

    _record(backward)
    return out


def mix_gate(gate: DiffValue, first: DiffValue, second: DiffValue) -> DiffValue:
    """gate[0]·first + gate[1]·second."""
    if gate.shape != (2,) or first.shape != second.shape:
        raise DataError(f"mix_gate: bad shapes gate={gate.shape} first={first.shape} second={second.shape}")
    c0, c1 = float(gate.value[0]), float(gate.value[1])
    out = DiffValue(c0 * first.value + c1 * second.value)

    def backward():
        g = out.grad
        gate.grad[0] += float((g * first.value).sum())
        gate.grad[1] += float((g * second.value).sum())
        first.grad += c0 * g
        second.grad += c1 * g

    _record(backward)
    return out


def scale_rows(x: DiffValue, weights: DiffValue) -> DiffValue:
    """Scale slice i of x (along axis 0) by weights[i]."""
    if weights.value.ndim != 1 or weights.shape[0] != x.shape[0]:
        raise DataError(f"scale_rows: weights {weights.shape} incompatible with {x.shape}")
    expand = (slice(None),) + (None,) * (x.value.ndim - 1)
    out = DiffValue(x.value * weights.value[expand])

    def backward():
        x.grad += out.grad * weights.value[expand]
        reduce_axes = tuple(range(1, x.value.ndim))
        weights.grad += (out.grad * x.value).sum(axis=reduce_axes)

    _record(backward)
    return out


# --- linear algebra and shape kernels -----------------------------------------

def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    """a @ b for 1-D/2-D operands."""
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise DataError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = DiffValue(av @ bv)

    def backward():
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = out.grad.reshape(a2.shape[0], b2.shape[1])
        a.grad += (g2 @ b2.T).reshape(av.shape)
        b.grad += (a2.T @ g2).reshape(bv.shape)

    _record(backward)
    return out


def gather_rows(table: DiffValue, ids: np.ndarray, mask: Optional[np.ndarray] = None) -> DiffValue:
    """table[ids] (optionally zeroed where mask == 0); adjoint scatters back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"gather_rows: index out of range for table of {table.shape[0]} rows")
    value = table.value[ids]
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)[..., None]
        value = value * mask
    out = DiffValue(value)

    def backward():
        g = out.grad if mask is None else out.grad * mask
        np.add.at(table.grad, ids, g)

    _record(backward)
    return out


def take(x: DiffValue, index) -> DiffValue:
    out = DiffValue(np.array(x.value[index], dtype=np.float64))

    def backward():
        np.add.at(x.grad, index, out.grad)

    _record(backward)
    return out


def mean(x: DiffValue, axis: int) -> DiffValue:
    size = x.shape[axis]
    out = DiffValue(x.value.mean(axis=axis))

    def backward():
        x.grad += np.expand_dims(out.grad, axis) / size

    _record(backward)
    return out


def sum_all(x: DiffValue) -> DiffValue:
    out = DiffValue(np.asarray(x.value.sum()))

    def backward():
        x.grad += out.grad

    _record(backward)
    return out


def concat(values: Sequence[DiffValue], axis: int = 0) -> DiffValue:
    if not values:
        raise DataError("concat: nothing to concatenate")
    out = DiffValue(np.concatenate([v.value for v in values], axis=axis))
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward():
        for v, piece in zip(values, np.split(out.grad, bounds, axis=axis)):
            v.grad += piece

    _record(backward)
    return out


def reshape(x: DiffValue, shape: Tuple[int, ...]) -> DiffValue:
    out = DiffValue(x.value.reshape(shape))

    def backward():
        x.grad += out.grad.reshape(x.shape)

    _record(backward)
    return out


def transpose(x: DiffValue, axes: Tuple[int, ...]) -> DiffValue:
    out = DiffValue(np.transpose(x.value, axes))
    inverse = tuple(np.argsort(axes))

    def backward():
        x.grad += np.transpose(out.grad, inverse)

    _record(backward)
    return out


def cross_entropy(logits: DiffValue, target: int) -> DiffValue:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.value.ndim != 1 or not 0 <= target < logits.shape[0]:
        raise DataError(f"cross_entropy: target {target} out of range for {logits.shape}")
    if not np.isfinite(logits.value).all():
        raise NumericError("cross_entropy: non-finite logits")
    lse = float(logsumexp(logits.value))
    out = DiffValue(np.asarray(lse - logits.value[target]))

    def backward():
        probs = np.exp(logits.value - lse)
        probs[target] -= 1.0
        logits.grad += float(out.grad) * probs

    _record(backward)
    return out


# --- finite-difference checking -----------------------------------------------

def _coordinates(size: int, max_coords: Optional[int], rng: Optional[np.random.Generator],
                 candidates: Optional[np.ndarray] = None) -> np.ndarray:
    pool = np.arange(size) if candidates is None else candidates
    if max_coords is None or pool.size <= max_coords:
        return pool
    rng = rng or np.random.default_rng(0)
    return np.sort(rng.choice(pool, size=max_coords, replace=False))


def _evaluate(f: Callable[[], DiffValue]) -> float:
    result = float(f().value)
    if not np.isfinite(result):
        raise NumericError(f"grad_check: program returned non-finite value {result}")
    return result


def _relative_error(exact: float, numeric: float) -> float:
    return abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)


def _directional_error(f: Callable[[], DiffValue], param: DiffValue, grad: np.ndarray, h: float,
                       rng: Optional[np.random.Generator], min_grad: float) -> float:
    """Central difference along the unit gradient direction, whose exact slope is ‖g‖.

    A block with an all-zero gradient is moved along a random direction instead and must not change the loss.
    """
    norm = float(np.linalg.norm(grad))
    if 0 < norm < min_grad:
        return 0.0
    if norm > 0:
        direction = grad / norm
    else:
        direction = (rng or np.random.default_rng(0)).standard_normal(grad.shape)
        direction /= np.linalg.norm(direction) or 1.0
    original = param.value.copy()
    param.value = original + h * direction
    plus = _evaluate(f)
    param.value = original - h * direction
    minus = _evaluate(f)
    param.value = original
    return _relative_error(norm, (plus - minus) / (2.0 * h))


def grad_check_blocks(f: Callable[[], DiffValue], params: Mapping[str, DiffValue], h: float = 1e-5,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      min_grad: float = 0.0, along_gradient: bool = False) -> Dict[str, float]:
    """Max relative error between analytic and central-difference gradients, per block.

    Coordinates whose analytic partial is below ``min_grad`` in magnitude are not sampled; at that size the
    central difference is rounding noise. ``along_gradient`` adds one directional check per block, which
    still covers those small coordinates through the block's whole gradient.
    """
    if h <= 0:
        raise UsageError(f"grad_check needs h > 0, got {h}")
    if min_grad < 0:
        raise UsageError(f"grad_check needs min_grad >= 0, got {min_grad}")
    for param in params.values():
        param.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {name: param.grad.copy() for name, param in params.items()}

    errors: Dict[str, float] = {}
    for name, param in params.items():
        param.value = np.ascontiguousarray(param.value)
        grad = analytic[name].reshape(-1)
        candidates = np.flatnonzero(np.abs(grad) >= min_grad) if min_grad > 0 else None
        worst = 0.0
        for index in _coordinates(grad.size, max_coords, rng, candidates):
            flat = param.value.reshape(-1)
            original = flat[index]
            flat[index] = original + h
            plus = _evaluate(f)
            flat[index] = original - h
            minus = _evaluate(f)
            flat[index] = original
            worst = max(worst, _relative_error(float(grad[index]), (plus - minus) / (2.0 * h)))
        if along_gradient:
            worst = max(worst, _directional_error(f, param, analytic[name], h, rng, min_grad))
        errors[name] = worst
        logger.debug("grad_check %s: max rel err %.3e", name, worst)
    return errors


def grad_check(f: Callable[[], DiffValue], params: Union[Sequence[DiffValue], Mapping[str, DiffValue]],
               h: float = 1e-5, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, min_grad: float = 0.0,
               along_gradient: bool = False) -> float:
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    errors = grad_check_blocks(f, params, h=h, max_coords=max_coords, rng=rng, min_grad=min_grad,
                               along_gradient=along_gradient)
    return max(errors.values(), default=0.0)
