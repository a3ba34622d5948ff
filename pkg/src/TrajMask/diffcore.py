"""
Reverse-mode differentiation over numpy arrays.

Every primitive returns a new :class:`Tensor`. When a :class:`Tape` is active and any input
requires a gradient, the primitive appends an entry holding a closure that maps the output
gradient to input gradients. :func:`backward` replays the tape in reverse.

GELU is the exact Gaussian-CDF form. Dropout is inverted dropout (retained activations are
scaled by ``1 / keep_prob``) and is the identity outside training.
"""
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .constants import DEBUG_ENV
from .exceptions import NonFiniteError, ShapeError, TapeError

ArrayLike = Union['Tensor', np.ndarray, float, int]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_TAPES: List['Tape'] = []
_debug = os.environ.get(DEBUG_ENV, '') not in ('', '0')

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_debug_mode(enabled: bool) -> None:
    """Turns the non-finite input checks on or off."""
    global _debug
    _debug = bool(enabled)


class Tensor:
    """
    An n-dimensional array with an optional gradient.

    Args:
        data: Values; floating arrays keep their dtype, anything else becomes float64.
        requires_grad (bool): Whether backward should populate ``grad``.
        name (str): Optional label used in error messages.
    """
    __slots__ = ('data', 'requires_grad', 'grad', 'name')

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Optional[np.dtype] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = self.name or 'Tensor'
        return '<{0} shape={1} requires_grad={2}>'.format(label, self.shape, self.requires_grad)

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return mul(other, self)

    def __neg__(self) -> 'Tensor':
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> 'Tensor':
        return matmul(self, other)


@dataclass
class TapeEntry:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    grad_fn: GradFn


class Tape:
    """
    Ordered record of the primitive operations run while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = mse(model(x), y)
        backward(tape, loss)
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __enter__(self) -> 'Tape':
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.entries)


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _emit(kind: str, inputs: Tuple[Tensor, ...], data: np.ndarray, grad_fn: GradFn) -> Tensor:
    if _debug:
        for i, t in enumerate(inputs):
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError('{0}: input {1} ({2}) contains non-finite values'.format(
                    kind, i, t.name or 'unnamed'))
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.entries.append(TapeEntry(kind, inputs, out, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError('{0}: incompatible shapes {1} and {2}'.format(kind, a.shape, b.shape))


# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape('add', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _emit('add', (a, b), a.data + b.data, grad_fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape('sub', a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _emit('sub', (a, b), a.data - b.data, grad_fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape('mul', a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _emit('mul', (a, b), a.data * b.data, grad_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    def grad_fn(g):
        return (g * factor,)
    return _emit('scale', (x,), x.data * factor, grad_fn)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)
    return _emit('gelu', (x,), x.data * cdf, grad_fn)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def grad_fn(g):
        return (g * positive,)
    return _emit('relu', (x,), np.where(positive, x.data, 0.0).astype(x.dtype), grad_fn)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - y * y),)
    return _emit('tanh', (x,), y, grad_fn)


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Selects ``a`` where ``cond`` holds and ``b`` elsewhere; ``cond`` is a constant mask."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data).astype(a.dtype, copy=False)

    def grad_fn(g):
        zero = np.zeros_like(g)
        return (_unbroadcast(np.where(cond, g, zero), a.shape),
                _unbroadcast(np.where(cond, zero, g), b.shape))
    return _emit('where', (a, b), out, grad_fn)


# linear algebra and normalization


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul: incompatible shapes {0} and {1}'.format(a.shape, b.shape))

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _emit('matmul', (a, b), np.matmul(a.data, b.data), grad_fn)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalizes over the last dimension, then applies ``gamma`` and ``beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError('layernorm: input {0} with scale {1} and shift {2}'.format(
            x.shape, gamma.shape, beta.shape))
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gamma = (g * x_hat).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        g_hat = g * gamma.data
        gx = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta
    return _emit('layernorm', (x, gamma, beta), x_hat * gamma.data + beta.data, grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _emit('softmax', (x,), y, grad_fn)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError('dropout: keep probability must lie in (0, 1], got {0}'.format(keep_prob))
    if not training or keep_prob == 1.0:
        return x
    keep = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob

    def grad_fn(g):
        return (g * keep,)
    return _emit('dropout', (x,), x.data * keep, grad_fn)


# indexing and shape


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Takes rows of ``x`` along axis 0; the output shape is ``index.shape + x.shape[1:]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError('gather: index range [{0}, {1}] outside axis of length {2}'.format(
            index.min(), index.max(), x.shape[0]))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)
    return _emit('gather', (x,), x.data[index], grad_fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    like = next((t for t in tensors if isinstance(t, Tensor)), None)
    parts = tuple(_as_tensor(t, like) for t in tensors)
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError('concat: incompatible shapes {0} and {1} along axis {2}'.format(
                parts[0].shape, p.shape, axis))
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=ax))
    return _emit('concat', parts, np.concatenate([p.data for p in parts], axis=ax), grad_fn)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 0))``."""
    out = x.data[key]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)
    return _emit('slice', (x,), np.array(out, copy=True), grad_fn)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape: cannot reshape {0} into {1}'.format(x.shape, tuple(shape)))

    def grad_fn(g):
        return (g.reshape(x.shape),)
    return _emit('reshape', (x,), out, grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)
    return _emit('transpose', (x,), np.transpose(x.data, axes), grad_fn)


# reductions and losses


def sum_(x: Tensor, axis: Optional[int] = None) -> Tensor:
    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _emit('sum', (x,), np.asarray(x.data.sum(axis=axis)), grad_fn)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / n)


def mse(pred: Tensor, target: ArrayLike, weight: Optional[np.ndarray] = None,
        reduction: str = 'mean') -> Tensor:
    """
    Squared error between ``pred`` and ``target``.

    Args:
        pred (Tensor): Predictions.
        target: Targets, same shape as ``pred``.
        weight (np.ndarray, optional): Constant per-element weights broadcastable to ``pred``;
            zero weight removes an element from both value and gradient.
        reduction (str): ``'mean'`` divides by the total weight, ``'sum'`` does not.

    Returns:
        Tensor: Scalar loss.
    """
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError('mse: incompatible shapes {0} and {1}'.format(pred.shape, target.shape))
    w = np.ones_like(pred.data) if weight is None else np.broadcast_to(
        np.asarray(weight, dtype=pred.dtype), pred.shape)
    diff = pred.data - target.data
    total = float(w.sum())
    if reduction == 'mean':
        if total <= 0:
            raise ShapeError('mse: every element has zero weight')
        denom = total
    elif reduction == 'sum':
        denom = 1.0
    else:
        raise ValueError('mse: unknown reduction {0!r}'.format(reduction))
    value = np.asarray((w * diff * diff).sum() / denom, dtype=pred.dtype)

    def grad_fn(g):
        gp = g * 2.0 * w * diff / denom
        return gp, -gp
    return _emit('mse', (pred, target), value, grad_fn)


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    'matmul': matmul, 'add': add, 'scale': scale, 'gelu': gelu, 'layernorm': layernorm,
    'softmax': softmax, 'dropout': dropout, 'gather': gather, 'concat': concat,
    'slice': slice_, 'mse': mse, 'sub': sub, 'mul': mul, 'where': where,
    'reshape': reshape, 'transpose': transpose, 'sum': sum_, 'mean': mean,
    'relu': relu, 'tanh': tanh,
}


def primitive_ops(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatches a primitive by name, e.g. ``primitive_ops('softmax', x)``."""
    try:
        op = PRIMITIVES[kind]
    except KeyError:
        raise ValueError('unknown primitive {0!r}'.format(kind))
    return op(*inputs, **kwargs)


def backward(tape: Tape, loss: Tensor) -> None:
    """
    Populates ``grad`` on every tensor that requires one and is reachable from ``loss``.

    Gradients add into any existing ``grad`` so fan-out and repeated calls accumulate;
    call ``zero_grad`` on parameters between optimization steps.

    Args:
        tape (Tape): The tape the loss was computed on.
        loss (Tensor): A single-element tensor recorded on ``tape``.
    """
    if loss.data.size != 1:
        raise TapeError('backward: loss must be a scalar, got shape {0}'.format(loss.shape))
    position = None
    for i in range(len(tape.entries) - 1, -1, -1):
        if tape.entries[i].output is loss:
            position = i
            break
    if position is None:
        raise TapeError('backward: loss was not recorded on this tape')

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: Dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries[:position + 1]):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        entry.output.grad = g
        for t, gi in zip(entry.inputs, entry.grad_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            holders[key] = t
            grads[key] = gi if key not in grads else grads[key] + gi

    for key, g in grads.items():
        t = holders[key]
        if g.shape != t.shape:
            g = g.reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g


def _named(params: Union[Mapping[str, Tensor], Sequence[Tensor]]) -> Dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {(p.name or 'param[{0}]'.format(i)): p for i, p in enumerate(params)}


def grad_check(f: Callable[[], Tensor], params: Union[Mapping[str, Tensor], Sequence[Tensor]],
               eps: float = 1e-5) -> float:
    """
    Compares analytic gradients with central finite differences.

    Args:
        f: Deterministic scalar function of ``params`` (dropout off, double precision).
        params: Tensors to check, by name or in a sequence.
        eps (float): Finite-difference step.

    Returns:
        float: Max over entries of ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    named = _named(params)
    for p in named.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    # a loss that touches no parameter is constant in them: every analytic gradient is 0
    if loss.requires_grad:
        backward(tape, loss)

    worst = 0.0
    for name, p in named.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError('grad_check: analytic gradient of {0} is not finite'.format(name))
        for idx in np.ndindex(*p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = f().item()
            p.data[idx] = orig - eps
            f_minus = f().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteError('grad_check: numeric gradient of {0}{1} is not finite'.format(
                    name, list(idx)))
            a = float(analytic[idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
