"""A small dense-tensor core with reverse-mode differentiation.

Only the layer set the two forecasting transformers need is provided. Each
layer is a single graph node with a hand-written backward rule, which keeps
the tape short enough for desk-scale training in pure numpy.

All arrays are float64. Graph nodes are only recorded when at least one
input requires a gradient, so inference passes build no tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import BadRate, BadShape, BatchTooSmall, NonDeterministic, ShapeMismatch

DTYPE = np.float64
LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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

        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), backward)


def total(x: Tensor) -> Tensor:
    return _node(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.mean(x.data), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def sum_of_squares(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    value = sum(float(np.sum(t.data * t.data)) for t in tensors)
    return _node(value, tensors, lambda g: tuple(2.0 * g * t.data for t in tensors))


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatch(f"dense: x{x.shape} W{W.shape} b{b.shape}")
    xd = x.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        return g @ W.data.T, x2.T @ g2, g2.sum(axis=0)

    return _node(xd @ W.data + b.data, (x, W, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, features: int) -> "BatchNormState":
        return cls(np.zeros(features, dtype=DTYPE), np.ones(features, dtype=DTYPE))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over every axis but the last.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into ``state``; inference mode only reads ``state``.
    """
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,) or state.mean.shape != (f,):
        raise ShapeMismatch(f"batch_norm: x{x.shape} gamma{gamma.shape}")
    x2 = x.data.reshape(-1, f)
    n = x2.shape[0]
    if not train:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x2 - state.mean) * inv

        def backward_infer(g):
            g2 = g.reshape(-1, f)
            return (
                (g2 * gamma.data * inv).reshape(x.shape),
                (g2 * xhat).sum(axis=0),
                g2.sum(axis=0),
            )

        out = (xhat * gamma.data + beta.data).reshape(x.shape)
        return _node(out, (x, gamma, beta), backward_infer)

    if n < 2:
        raise BatchTooSmall(f"batch_norm in train mode needs >= 2 rows, got {n}")
    mu = x2.mean(axis=0)
    xc = x2 - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    state.mean = momentum * state.mean + (1.0 - momentum) * mu
    state.var = momentum * state.var + (1.0 - momentum) * var

    def backward(g):
        g2 = g.reshape(-1, f)
        gh = g2 * gamma.data
        gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return gx.reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)

    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    return _node(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity in inference mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise BadRate(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise BadRate("train-mode dropout needs a random source")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the sequence axis of a ``[batch, seq, d]`` tensor."""
    if x.data.ndim != 3 or x.shape[1] < 1:
        raise ShapeMismatch(f"global_average_pool expects [batch, seq>=1, d], got {x.shape}")
    s = x.shape[1]
    return _node(
        x.data.mean(axis=1),
        (x,),
        lambda g: (np.repeat(g[:, None, :] / s, s, axis=1),),
    )


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise BadShape(f"d_model must be even, got {d_model}")
    pos = np.arange(seq_len, dtype=DTYPE)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=DTYPE)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.empty((seq_len, d_model), dtype=DTYPE)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


ATTENTION_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def multi_head_attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over ``[batch, seq, d_model]``.

    ``params`` holds the projections named in ``ATTENTION_KEYS``.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch(f"attention expects [batch, seq, d_model], got {x.shape}")
    bsz, seq, d = x.shape
    if heads < 1 or d % heads:
        raise ShapeMismatch(f"d_model {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (bsz, seq, heads, dh)), (0, 2, 1, 3))

    q = split(dense(x, params["Wq"], params["bq"]))
    k = split(dense(x, params["Wk"], params["bk"]))
    v = split(dense(x, params["Wv"], params["bv"]))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax_rows(scores)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (bsz, seq, d))
    out = dense(ctx, params["Wo"], params["bo"])
    if return_weights:
        return out, weights.data
    return out


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size
    return _node(np.mean(diff * diff), (pred,), lambda g: (g * 2.0 * diff / n,))


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean softmax cross-entropy of ``[batch, classes]`` logits.

    ``weights`` optionally rescales each class's contribution.
    """
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(labels.size)
    w = np.ones(labels.size) if weights is None else np.asarray(weights, dtype=DTYPE)[labels]
    norm = w.sum()
    value = -np.sum(w * logp[rows, labels]) / norm

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p * (w / norm)[:, None],)

    return _node(value, (logits,), backward)


# ---------------------------------------------------------------------------
# parameters, randomness, verification


def make_rng(seed: int) -> np.random.Generator:
    """A PCG64 generator; identical seeds give identical streams everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


class ParameterSet:
    """Named trainable tensors, addressed by dotted paths like ``block0.attn.Wq``."""

    def __init__(self, tensors: Mapping[str, np.ndarray | Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value):
        data = value.data if isinstance(value, Tensor) else value
        self._tensors[name] = Tensor(np.array(data, dtype=DTYPE), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def scope(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix.``, keyed by the remainder of their path."""
        head = prefix + "."
        return {k[len(head):]: v for k, v in self._tensors.items() if k.startswith(head)}

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._tensors[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._tensors.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.arrays())

    def count(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_path: str
    worst_index: tuple
    checked: int


def grad_check(
    fn: Callable[[], Tensor],
    params: ParameterSet,
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    The per-entry error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``max_entries`` caps the entries probed per tensor (sampled with ``seed``).
    """
    base = fn().item()
    if fn().item() != base:
        raise NonDeterministic("two forward passes at the same point disagree")
    params.zero_grad()
    fn().backward()
    analytic = {name: params.grad(name).copy() for name in params}

    rng = make_rng(seed)
    worst = GradCheckResult(0.0, "", (), 0)
    checked = 0
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst.max_rel_error or not worst.worst_path:
                worst = GradCheckResult(err, name, np.unravel_index(i, tensor.shape), 0)
    worst.checked = checked
    return worst
