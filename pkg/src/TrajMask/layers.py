"""Parameter containers and network building blocks on top of :mod:`diffcore`."""
import copy
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from . import diffcore as dc
from .diffcore import Tensor
from .exceptions import ShapeError


def trunc_normal(shape: Tuple[int, ...], std: float, rng: np.random.Generator,
                 dtype=np.float64) -> np.ndarray:
    """Normal(0, std) samples truncated to two standard deviations."""
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


def fan_in_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator,
                   dtype=np.float64) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """
    Base class for anything holding parameters.

    Parameters are attributes holding a ``Tensor`` with ``requires_grad``; sub-modules may be
    attributes, lists of modules or dicts of modules. Names follow attribute order, e.g.
    ``encoder.0.attn.query.weight``.
    """
    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield '{0}.{1}'.format(key, i), item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield '{0}.{1}'.format(key, k), item

    def named_parameters(self, prefix: str = '') -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for key, value in self._children():
            name = prefix + key
            if isinstance(value, Tensor):
                if value.requires_grad:
                    params[name] = value
            else:
                params.update(value.named_parameters(name + '.'))
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator['Module']:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> 'Module':
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ShapeError('load_state_dict: missing {0}, unexpected {1}'.format(
                sorted(missing), sorted(unexpected)))
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError('load_state_dict: {0} expects {1}, got {2}'.format(
                    name, p.shape, value.shape))
            p.data[...] = value

    def clone(self) -> 'Module':
        """Deep copy sharing nothing with the source (RNG handles included)."""
        return copy.deepcopy(self)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, std: float = 0.02,
                 init: str = 'trunc_normal', dtype=np.float64):
        if init == 'trunc_normal':
            w = trunc_normal((in_dim, out_dim), std, rng, dtype)
            b = np.zeros(out_dim, dtype=dtype)
        else:
            w = fan_in_uniform((in_dim, out_dim), in_dim, rng, dtype)
            b = fan_in_uniform((out_dim,), in_dim, rng, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError('linear: input {0} does not match weight {1}'.format(
                x.shape, self.weight.shape))
        return dc.add(dc.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layernorm(x, self.gamma, self.beta)


class MLP(Module):
    """
    Feed-forward stack ``Linear -> [LayerNorm] -> activation`` repeated per hidden layer,
    then an output ``Linear``.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator,
                 activation: str = 'gelu', layer_norm: bool = False, init: str = 'trunc_normal',
                 std: float = 0.02, dtype=np.float64):
        dims = [in_dim] + list(hidden)
        self.hidden = [Linear(dims[i], dims[i + 1], rng, std, init, dtype) for i in range(len(hidden))]
        self.norms = [LayerNorm(d, dtype) for d in hidden] if layer_norm else []
        self.out = Linear(dims[-1], out_dim, rng, std, init, dtype)
        self.activation = activation

    def _act(self, x: Tensor) -> Tensor:
        if self.activation == 'gelu':
            return dc.gelu(x)
        if self.activation == 'relu':
            return dc.relu(x)
        if self.activation == 'tanh':
            return dc.tanh(x)
        raise ValueError('unknown activation {0!r}'.format(self.activation))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.hidden):
            x = layer(x)
            if self.norms:
                x = self.norms[i](x)
            x = self._act(x)
        return self.out(x)


class MultiHeadAttention(Module):
    """Bidirectional multi-head self-attention; ``key_bias`` excludes padding keys."""

    def __init__(self, dim: int, n_heads: int, dropout: float, rng: np.random.Generator,
                 dropout_rng: np.random.Generator, std: float = 0.02, dtype=np.float64):
        if dim % n_heads:
            raise ShapeError('attention: embed dim {0} not divisible by {1} heads'.format(dim, n_heads))
        self.query = Linear(dim, dim, rng, std, dtype=dtype)
        self.key = Linear(dim, dim, rng, std, dtype=dtype)
        self.value = Linear(dim, dim, rng, std, dtype=dtype)
        self.proj = Linear(dim, dim, rng, std, dtype=dtype)
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.keep_prob = 1.0 - dropout
        self.dropout_rng = dropout_rng

    def __call__(self, x: Tensor, key_bias: Optional[np.ndarray] = None) -> Tensor:
        b, n, d = x.shape

        def split(t: Tensor) -> Tensor:
            return dc.transpose(dc.reshape(t, (b, n, self.n_heads, self.head_dim)), (0, 2, 1, 3))

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        if key_bias is not None:
            scores = dc.add(scores, key_bias.astype(x.dtype))
        weights = dc.softmax(scores, axis=-1)
        weights = dc.dropout(weights, self.keep_prob, self.dropout_rng, self.training)
        context = dc.matmul(weights, v)
        context = dc.reshape(dc.transpose(context, (0, 2, 1, 3)), (b, n, d))
        return self.proj(context)


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ff(ln(x))``."""

    def __init__(self, dim: int, n_heads: int, dropout: float, ff_mult: int,
                 rng: np.random.Generator, dropout_rng: np.random.Generator,
                 std: float = 0.02, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, n_heads, dropout, rng, dropout_rng, std, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ff_in = Linear(dim, ff_mult * dim, rng, std, dtype=dtype)
        self.ff_out = Linear(ff_mult * dim, dim, rng, std, dtype=dtype)
        self.keep_prob = 1.0 - dropout
        self.dropout_rng = dropout_rng

    def __call__(self, x: Tensor, key_bias: Optional[np.ndarray] = None) -> Tensor:
        x = dc.add(x, self.attn(self.norm1(x), key_bias))
        h = self.ff_out(dc.gelu(self.ff_in(self.norm2(x))))
        h = dc.dropout(h, self.keep_prob, self.dropout_rng, self.training)
        return dc.add(x, h)


def polyak_update(target: Module, source: Module, tau: float) -> None:
    """``target <- tau * source + (1 - tau) * target`` for every parameter."""
    src = source.named_parameters()
    for name, t in target.named_parameters().items():
        s = src[name]
        t.data[...] = tau * s.data + (1.0 - tau) * t.data
