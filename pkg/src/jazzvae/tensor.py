"""Dense float64 tensors with reverse-mode differentiation, GRU layers and ADAM.

Every op records its parents and a closure mapping the output gradient to
input gradients. ``backward`` replays the recorded ops in exact reverse
creation order.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_finite_check = False
_grad_enabled = True


class ShapeError(ValueError):
    pass


def set_finite_check(enabled: bool) -> bool:
    """Turn the non-finite guard on every op output and gradient on or off. Returns the old setting."""
    global _finite_check
    old, _finite_check = _finite_check, bool(enabled)
    return old


class no_grad:
    """Context manager: ops inside record no graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def _guard(arr: np.ndarray, what: str) -> None:
    if _finite_check and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._order = next(_counter)
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if x.__class__ is Tensor else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    _guard(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._order = next(_counter)
    out._op = op
    out.grad = None
    p = None
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                break
        else:
            p = None
    if p is not None:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise and linear algebra ----------------------------------------

def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        _binary(np.add, a, b, "add"), (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        _binary(np.subtract, a, b, "sub"), (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        _binary(np.multiply, a, b, "mul"), (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
        "mul",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(x, bias) -> Tensor:
    """Row-broadcast add of a vector bias to a (batch, n) matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    return add(x, bias)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # overflow-free form
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# --- reductions and reshaping ------------------------------------------------

def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis)

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(y, dtype=np.float64), (x,), fn, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    y = x.data[index]

    def fn(g):
        out = np.zeros_like(x.data)
        out[index] += g
        return (out,)

    return _node(np.array(y, dtype=np.float64), (x,), fn, "slice")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: no inputs")
    ndim = xs[0].data.ndim
    ax = axis % ndim
    for x in xs[1:]:
        if x.data.ndim != ndim or any(x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def fn(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _node(np.concatenate([x.data for x in xs], axis=ax), xs, fn, "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    return _node(
        np.stack([x.data for x in xs], axis=axis), xs,
        lambda g: tuple(np.moveaxis(g, axis, 0)), "stack",
    )


# --- losses ------------------------------------------------------------------

BCE_EPS = 1e-12


def binary_cross_entropy(target, prob) -> Tensor:
    """Summed BCE; ``target`` is a constant, probabilities are clipped to [eps, 1-eps]."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    prob = as_tensor(prob)
    if target.shape != prob.shape:
        raise ShapeError(f"binary_cross_entropy: incompatible shapes {target.shape} and {prob.shape}")
    p = np.clip(prob.data, BCE_EPS, 1.0 - BCE_EPS)
    value = -np.sum(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    return _node(np.asarray(value), (prob,), lambda g: (g * (p - target) / (p * (1.0 - p)),), "bce")


# --- backward ----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack_.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._order, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        _guard(g, f"gradient of {t._op}")
        if t.grad is None:
            # leaves own their buffer: clipping and accumulation write into it
            t.grad = g if t._parents else g.copy()
        elif t._parents:
            t.grad = t.grad + g  # may alias a neighbour's buffer; never write in place
        else:
            t.grad += g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- layers ------------------------------------------------------------------

def init_uniform(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class GRUParams:
    """Weights act on the concatenation [x, h]; shapes (n_in + n_hidden, n_hidden)."""

    W_r: Tensor
    W_u: Tensor
    W_c: Tensor
    b_r: Tensor
    b_u: Tensor
    b_c: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_hidden: int) -> GRUParams:
        fan_in = n_in + n_hidden
        shape = (fan_in, n_hidden)
        return cls(
            init_uniform(rng, fan_in, shape),
            init_uniform(rng, fan_in, shape),
            init_uniform(rng, fan_in, shape),
            Tensor(np.zeros(n_hidden), requires_grad=True),
            Tensor(np.zeros(n_hidden), requires_grad=True),
            Tensor(np.zeros(n_hidden), requires_grad=True),
        )

    @property
    def n_hidden(self) -> int:
        return self.W_r.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("W_r", "W_u", "W_c", "b_r", "b_u", "b_c")}


def gru_cell(x: Tensor, h_prev: Tensor, p: GRUParams) -> Tensor:
    """One GRU step: reset gate r, update gate u, candidate state c.

    h' = (1 - u) * h + u * c
    """
    n_in = p.W_r.shape[0] - p.n_hidden
    if x.shape[-1] != n_in or h_prev.shape[-1] != p.n_hidden:
        raise ShapeError(f"gru_cell: input {x.shape} / state {h_prev.shape} do not fit weights {p.W_r.shape}")
    xh = concat([x, h_prev], axis=1)
    r = sigmoid(add(matmul(xh, p.W_r), p.b_r))
    u = sigmoid(add(matmul(xh, p.W_u), p.b_u))
    c = tanh(add(matmul(concat([x, mul(r, h_prev)], axis=1), p.W_c), p.b_c))
    return add(h_prev, mul(u, sub(c, h_prev)))


def gru(sequence: Sequence[Tensor], h0: Tensor, p: GRUParams) -> list[Tensor]:
    h = h0
    out = []
    for x in sequence:
        h = gru_cell(x, h, p)
        out.append(h)
    return out


def bgru(sequence: Sequence[Tensor], fwd: GRUParams, bwd: GRUParams) -> list[Tensor]:
    """Bidirectional GRU; step t yields [forward state after x_1..x_t, backward state after x_T..x_t]."""
    if len(sequence) == 0:
        raise ShapeError("bgru: empty sequence")
    batch = sequence[0].shape[0]
    hf = gru(sequence, Tensor(np.zeros((batch, fwd.n_hidden))), fwd)
    hb = gru(sequence[::-1], Tensor(np.zeros((batch, bwd.n_hidden))), bwd)[::-1]
    return [concat([f, b], axis=1) for f, b in zip(hf, hb)]


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> Dense:
        return cls(init_uniform(rng, n_in, (n_in, n_out)), Tensor(np.zeros(n_out), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.W), self.b)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


# --- optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.t = 0
        self.m.clear()
        self.v.clear()


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected ADAM update, in place on ``params``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {name} {theta.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_grad_norm(grads: Iterable[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = list(grads)
    norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads])))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"JZVAE-CKPT 1\n"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON header; output bytes depend only on the inputs."""
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    body = rest[nl + 1:]
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]
