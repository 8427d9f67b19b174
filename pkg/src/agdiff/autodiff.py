"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Operations on `Tensor` record a computation graph (the tape) as they run.
`backward` walks the graph once in reverse topological order and accumulates
vector-Jacobian products into every `requires_grad` leaf. The primitive set
is deliberately small: add, sub, mul, matmul, tanh, relu, exp, log, sum,
mean, concat, slice, broadcast, L2-norm, softplus. Everything else (sigmoid,
cosine similarity, losses) is composed from these.

All data is float64. Single tape, single thread; separate tapes over shared
read-only parameters may run concurrently.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "forward",
    "backward",
    "vjp",
    "grad_check",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "tanh",
    "relu",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "tsum",
    "tmean",
    "concat",
    "broadcast_to",
    "norm",
    "transpose",
]

# Opt-in NaN/Inf checking after every primitive (debug builds).
DEBUG_CHECK_FINITE = bool(int(os.environ.get("AGDIFF_DEBUG_FINITE", "0")))

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference-speed paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    """Re-enable recording inside a no_grad block (nested VJP extraction)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


def _check_finite(op: str, data: np.ndarray) -> None:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite value in result")


class Tensor:
    """Dense float64 array participating in a recorded computation.

    `data` is a numpy array, `requires_grad` marks leaves whose gradients
    `backward` must produce. Interior nodes carry `_parents` and matching
    `_vjps` closures mapping an output cotangent to each parent cotangent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[np.ndarray], np.ndarray] | None, ...] = ()

    @classmethod
    def _node(cls, data, parents, vjps) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        # Interior nodes need grad iff any parent does; prune dead branches.
        keep = tuple(p.requires_grad for p in parents)
        out.requires_grad = _GRAD_ENABLED and any(keep)
        if out.requires_grad:
            out._parents = parents
            out._vjps = tuple(v if k else None for v, k in zip(vjps, keep))
        else:
            out._parents = ()
            out._vjps = ()
        return out

    # -- introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Value copy with no gradient history."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, float(other))
        return add(self, _wrap(other))

    def __radd__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, float(other))
        return add(_wrap(other), self)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return _shift(self, -float(other))
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return _shift(_scale(self, -1.0), float(other))
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return mul(_wrap(other), self)

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return _getitem(self, key)

    # -- convenience -----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        return _reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self, cotangent: np.ndarray | None = None) -> None:
        """Accumulate gradients into `.grad` of every requires_grad leaf."""
        if cotangent is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward: implicit cotangent requires scalar output, got {self.shape}"
                )
            cotangent = np.ones_like(self.data)
        grads = _backprop(self, np.asarray(cotangent, dtype=np.float64))
        for leaf, g in grads.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _scale(a: Tensor, s: float) -> Tensor:
    return Tensor._node(a.data * s, (a,), (lambda g: g * s,))


def _shift(a: Tensor, s: float) -> Tensor:
    return Tensor._node(a.data + s, (a,), (lambda g: g,))


# -- broadcasting helper ---------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    try:
        np.broadcast_shapes(a.shape, b.shape)
        return True
    except ValueError:
        return False


# -- primitives ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")
    out = a.data + b.data
    _check_finite("add", out)
    return Tensor._node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")
    out = a.data - b.data
    _check_finite("sub", out)
    return Tensor._node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    out = a.data * b.data
    _check_finite("mul", out)
    return Tensor._node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1D/2D operands (numpy `@` semantics)."""
    ad, bd = a.data, b.data
    if ad.ndim > 2 or bd.ndim > 2 or ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: only 1D/2D operands supported, got {a.shape} @ {b.shape}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    out = ad @ bd
    _check_finite("matmul", out)

    def vjp_a(g: np.ndarray) -> np.ndarray:
        if ad.ndim == 1 and bd.ndim == 1:  # dot -> scalar
            return g * bd
        if ad.ndim == 1:  # (n,) @ (n,m) -> (m,)
            return bd @ g
        if bd.ndim == 1:  # (k,n) @ (n,) -> (k,)
            return np.outer(g, bd)
        return g @ bd.T

    def vjp_b(g: np.ndarray) -> np.ndarray:
        if ad.ndim == 1 and bd.ndim == 1:
            return g * ad
        if ad.ndim == 1:
            return np.outer(ad, g)
        if bd.ndim == 1:
            return ad.T @ g
        return ad.T @ g

    return Tensor._node(out, (a, b), (vjp_a, vjp_b))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    _check_finite("tanh", out)
    return Tensor._node(out, (a,), (lambda g: g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return Tensor._node(out, (a,), (lambda g: g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    _check_finite("exp", out)
    return Tensor._node(out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    _check_finite("log", out)
    return Tensor._node(out, (a,), (lambda g: g / a.data,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably for large |x|."""
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))
    return Tensor._node(out, (a,), (lambda g: g * sig,))


def sigmoid(a: Tensor) -> Tensor:
    """Composed primitive: sigmoid(x) = exp(-softplus(-x))."""
    return exp(-softplus(-a))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp_fn(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return Tensor._node(np.asarray(out, dtype=np.float64), (a,), (vjp_fn,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp_fn(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.full_like(a.data, g / n) if not np.ndim(g) else np.broadcast_to(g / n, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / n, a.data.shape).copy()

    return Tensor._node(np.asarray(out, dtype=np.float64), (a,), (vjp_fn,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input list")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        def vjp_fn(g: np.ndarray) -> np.ndarray:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]

        return vjp_fn

    return Tensor._node(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp_fn(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(a.data)
        full[key] = g
        return full

    return Tensor._node(np.asarray(out, dtype=np.float64), (a,), (vjp_fn,))


def _reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._node(out, (a,), (lambda g: g.reshape(a.data.shape),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from e
    return Tensor._node(out, (a,), (lambda g: _unbroadcast(g, a.data.shape),))


def transpose(a: Tensor) -> Tensor:
    """2D transpose (shape plumbing, zero arithmetic)."""
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2D, got {a.shape}")
    return Tensor._node(np.ascontiguousarray(a.data.T), (a,), (lambda g: g.T,))


def norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """L2 norm over the whole tensor or along one axis."""
    sq = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def vjp_fn(g: np.ndarray) -> np.ndarray:
        n = sq if keepdims or axis is None else np.expand_dims(sq, axis)
        gg = g if keepdims or axis is None else np.expand_dims(g, axis)
        return gg * a.data / n

    return Tensor._node(np.asarray(sq, dtype=np.float64), (a,), (vjp_fn,))


# -- tape + backward engine --------------------------------------------------


class Tape:
    """Handle to a recorded forward pass; one backward pass per tape."""

    __slots__ = ("output", "consumed")

    def __init__(self, output: Tensor):
        self.output = output
        self.consumed = False


def forward(graph_fn: Callable[..., Tensor], *inputs: Tensor) -> tuple[Tensor, Tape]:
    """Evaluate `graph_fn` on Tensors, returning (output, tape)."""
    out = graph_fn(*inputs)
    if not isinstance(out, Tensor):
        raise TypeError("forward: graph_fn must return a Tensor")
    return out, Tape(out)


def _backprop(output: Tensor, cotangent: np.ndarray) -> dict[Tensor, np.ndarray]:
    if cotangent.shape != output.data.shape:
        raise ShapeError(
            f"backward: cotangent shape {cotangent.shape} != output shape {output.data.shape}"
        )
    if not output.requires_grad:
        return {}

    # Reverse topological order via iterative post-order DFS.
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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    cots: dict[int, np.ndarray] = {id(output): cotangent}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = cots.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                leaf_grads[node] = g
            continue
        for p, vjp_fn in zip(node._parents, node._vjps):
            if vjp_fn is None:
                continue
            pg = vjp_fn(g)
            pid = id(p)
            if pid in cots:
                cots[pid] = cots[pid] + pg
            else:
                cots[pid] = pg
    return leaf_grads


def backward(tape: Tape, output_cotangent: np.ndarray | Tensor) -> dict[Tensor, np.ndarray]:
    """Run the reverse pass, mapping each requires_grad leaf to its gradient."""
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed")
    tape.consumed = True
    cot = output_cotangent.data if isinstance(output_cotangent, Tensor) else output_cotangent
    return _backprop(tape.output, np.asarray(cot, dtype=np.float64))


def vjp(graph_fn: Callable[[Tensor], Tensor], input: Tensor, cotangent: np.ndarray | Tensor) -> Tensor:
    """(d graph_fn / d input)^T . cotangent, returned with no gradient history."""
    leaf = Tensor(input.data, requires_grad=True)
    out, tape = forward(graph_fn, leaf)
    grads = backward(tape, cotangent)
    g = grads.get(leaf)
    if g is None:
        g = np.zeros_like(leaf.data)
    return Tensor(g)


def grad_check(
    graph_fn: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central finite differences.

    Vector-valued functions are scalarized through a fixed probe cotangent so
    one backward pass is compared against directional finite differences.
    Error metric per coordinate: |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    x0 = point.data.astype(np.float64)
    out0 = graph_fn(Tensor(x0)).data
    probe = np.random.default_rng(1234).standard_normal(out0.shape) if out0.size > 1 else np.ones_like(out0)

    leaf = Tensor(x0, requires_grad=True)
    out, tape = forward(graph_fn, leaf)
    analytic = backward(tape, probe).get(leaf)
    if analytic is None:
        analytic = np.zeros_like(x0)

    def scalar_at(x: np.ndarray) -> float:
        return float(np.sum(graph_fn(Tensor(x)).data * probe))

    fd = np.zeros_like(x0)
    flat = fd.reshape(-1)
    xflat = x0.reshape(-1)
    for i in range(xflat.size):
        orig = xflat[i]
        xflat[i] = orig + step
        fp = scalar_at(x0)
        xflat[i] = orig - step
        fm = scalar_at(x0)
        xflat[i] = orig
        flat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom))
