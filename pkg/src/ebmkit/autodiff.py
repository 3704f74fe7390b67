"""Reverse-mode automatic differentiation over an explicit tape.

Everything is float64. Operations record onto a ``Tape``; ``backward``
walks the tape in reverse topological order. With ``create_graph=True``
the backward pass is itself built out of recorded primitives, so a
second backward through a gradient (needed for input-gradient
penalties) is an ordinary tape traversal.

A Tape is single-writer: never record onto one tape from two threads of
control. Distinct tapes are independent and completed tensors are
immutable, so read-only sharing is safe.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "GradientMap",
    "record",
    "backward",
    "grad_l2norm_of_grad",
    # primitive ops
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "broadcast", "sum_", "mean", "relu", "exp", "log", "logsumexp",
    "square", "sqrt", "l2norm", "gather", "take", "scatter_add", "conv2d",
]


class ShapeError(ValueError):
    """An operation received tensors whose shapes do not compose."""


def _as_array(value) -> np.ndarray:
    # order="C" (not ascontiguousarray) so 0-d scalars keep their shape
    return np.asarray(value, dtype=np.float64, order="C")


class Tensor:
    """N-dimensional float64 value, optionally attached to a tape node.

    ``value`` is a C-contiguous array (row-major flat buffer); treat it
    as immutable once the tensor exists.
    """

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.value = _as_array(value)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.value.reshape(-1)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.value.reshape(()))

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("kind", "parents", "inputs", "value", "forward_fn", "vjp")

    def __init__(self, kind, parents, inputs, value, forward_fn, vjp):
        self.kind = kind
        self.parents = parents      # ids of recorded parents, strictly < own id
        self.inputs = inputs        # per-argument: int node id, or baked constant
        self.value = value          # cached forward value
        self.forward_fn = forward_fn  # None for leaves
        self.vjp = vjp              # g -> [(parent_id, grad Tensor)], None for leaves


class Tape:
    """Ordered record of operations; node ids are topological."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._recording = True

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Tensor:
        """Register an input as a differentiable leaf."""
        arr = _as_array(value)
        self.nodes.append(_Node("leaf", (), (), arr, None, None))
        return Tensor(arr, self, len(self.nodes) - 1)

    def is_leaf(self, node_id: int) -> bool:
        return self.nodes[node_id].forward_fn is None

    def replay_matches(self) -> bool:
        """Recompute every node from the leaves; True iff all cached values
        are reproduced bit-exactly."""
        replayed: dict[int, np.ndarray] = {}
        for nid, node in enumerate(self.nodes):
            if node.forward_fn is None:
                replayed[nid] = node.value
                continue
            args = [replayed[a] if isinstance(a, int) else a for a in node.inputs]
            out = node.forward_fn(*args)
            if not np.array_equal(out, node.value):
                return False
            replayed[nid] = out
        return True


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(tensors: Sequence[Tensor]) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("inputs are recorded on different tapes")
    return tape


def _register(kind: str, inputs: Sequence[Tensor], value: np.ndarray,
              forward_fn: Callable, vjp_factory: Callable[[Tensor], Callable]) -> Tensor:
    value = _as_array(value)
    tape = _find_tape(inputs)
    if tape is None or not tape._recording:
        return Tensor(value)
    parents = tuple(t.node for t in inputs if t.node is not None)
    descr = tuple(t.node if t.node is not None else t.value for t in inputs)
    node = _Node(kind, parents, descr, value, forward_fn, None)
    tape.nodes.append(node)
    out = Tensor(value, tape, len(tape.nodes) - 1)
    node.vjp = vjp_factory(out)
    return out


def _pairs(*entries) -> list:
    """Keep (tensor, grad) pairs whose tensor is actually recorded."""
    return [(t.node, g) for t, g in entries if t.node is not None]


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _binary_forward(kind: str, a: Tensor, b: Tensor, fn: Callable) -> np.ndarray:
    try:
        return fn(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from exc


def _unbroadcast(g: Tensor, target_shape: tuple) -> Tensor:
    """Sum a broadcast gradient back down to ``target_shape``."""
    if g.shape == target_shape:
        return g
    extra = g.ndim - len(target_shape)
    axes = list(range(extra))
    for i, dim in enumerate(target_shape):
        if dim == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = sum_(g, axis=tuple(axes)) if axes else g
    return reshape(out, target_shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _binary_forward("add", a, b, np.add)

    def factory(_):
        def vjp(g):
            return _pairs((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))
        return vjp

    return _register("add", (a, b), out, np.add, factory)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _binary_forward("sub", a, b, np.subtract)

    def factory(_):
        def vjp(g):
            return _pairs((a, _unbroadcast(g, a.shape)),
                          (b, _unbroadcast(neg(g), b.shape)))
        return vjp

    return _register("sub", (a, b), out, np.subtract, factory)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _binary_forward("mul", a, b, np.multiply)

    def factory(_):
        def vjp(g):
            return _pairs((a, _unbroadcast(mul(g, b), a.shape)),
                          (b, _unbroadcast(mul(g, a), b.shape)))
        return vjp

    return _register("mul", (a, b), out, np.multiply, factory)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = _binary_forward("div", a, b, np.divide)

    def factory(_):
        def vjp(g):
            return _pairs((a, _unbroadcast(div(g, b), a.shape)),
                          (b, _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)))
        return vjp

    return _register("div", (a, b), out, np.divide, factory)


def neg(a) -> Tensor:
    a = _lift(a)

    def factory(_):
        def vjp(g):
            return _pairs((a, neg(g)))
        return vjp

    return _register("neg", (a,), np.negative(a.value), np.negative, factory)


# ---------------------------------------------------------------------------
# linear algebra / layout

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def factory(_):
        def vjp(g):
            return _pairs((a, matmul(g, transpose(b))),
                          (b, matmul(transpose(a), g)))
        return vjp

    return _register("matmul", (a, b), a.value @ b.value, np.matmul, factory)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.asarray(np.transpose(a.value, axes), order="C")

    def forward_fn(av):
        return np.asarray(np.transpose(av, axes), order="C")

    def factory(_):
        def vjp(g):
            return _pairs((a, transpose(g, inverse)))
        return vjp

    return _register("transpose", (a,), out, forward_fn, factory)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    try:
        out = np.asarray(a.value.reshape(shape), order="C")
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src_shape = a.shape

    def forward_fn(av):
        return np.asarray(av.reshape(shape), order="C")

    def factory(_):
        def vjp(g):
            return _pairs((a, reshape(g, src_shape)))
        return vjp

    return _register("reshape", (a,), out, forward_fn, factory)


def broadcast(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.asarray(np.broadcast_to(a.value, shape), order="C").copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from exc
    src_shape = a.shape

    def forward_fn(av):
        return np.asarray(np.broadcast_to(av, shape), order="C").copy()

    def factory(_):
        def vjp(g):
            return _pairs((a, _unbroadcast(g, src_shape)))
        return vjp

    return _register("broadcast", (a,), out, forward_fn, factory)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(a % ndim for a in axis))


def _keep_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    keep = _keep_shape(a.shape, axes)
    src_shape = a.shape
    out = np.sum(a.value, axis=axes or None, keepdims=keepdims)

    def forward_fn(av):
        return np.sum(av, axis=axes or None, keepdims=keepdims)

    def factory(_):
        def vjp(g):
            return _pairs((a, broadcast(reshape(g, keep), src_shape)))
        return vjp

    return _register("sum", (a,), out, forward_fn, factory)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    keep = _keep_shape(a.shape, axes)
    src_shape = a.shape
    count = float(np.prod([a.shape[i] for i in axes])) if axes else 1.0
    out = np.mean(a.value, axis=axes or None, keepdims=keepdims)

    def forward_fn(av):
        return np.mean(av, axis=axes or None, keepdims=keepdims)

    def factory(_):
        def vjp(g):
            return _pairs((a, broadcast(reshape(mul(g, 1.0 / count), keep), src_shape)))
        return vjp

    return _register("mean", (a,), out, forward_fn, factory)


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) with max-subtraction for overflow safety."""
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    keep = _keep_shape(a.shape, axes)
    src_shape = a.shape

    def forward_fn(av):
        m = np.max(av, axis=axes or None, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.log(np.sum(np.exp(av - m), axis=axes or None, keepdims=True)) + m
        return s if keepdims else s.reshape(_drop_axes(av.shape, axes))

    out = forward_fn(a.value)

    def factory(out_t):
        def vjp(g):
            y = out_t if keepdims else reshape(out_t, keep)
            soft = exp(sub(a, broadcast(y, src_shape)))
            gg = g if keepdims else reshape(g, keep)
            return _pairs((a, mul(broadcast(gg, src_shape), soft)))
        return vjp

    return _register("logsumexp", (a,), out, forward_fn, factory)


def _drop_axes(shape: tuple, axes: tuple) -> tuple:
    return tuple(d for i, d in enumerate(shape) if i not in axes)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a) -> Tensor:
    a = _lift(a)
    mask = (a.value > 0).astype(np.float64)

    def forward_fn(av):
        return np.maximum(av, 0.0)

    def factory(_):
        def vjp(g):
            # relu'' is zero a.e.; the mask is a constant w.r.t. differentiation
            return _pairs((a, mul(g, mask)))
        return vjp

    return _register("relu", (a,), np.maximum(a.value, 0.0), forward_fn, factory)


def exp(a) -> Tensor:
    a = _lift(a)

    def factory(out_t):
        def vjp(g):
            return _pairs((a, mul(g, out_t)))
        return vjp

    return _register("exp", (a,), np.exp(a.value), np.exp, factory)


def log(a) -> Tensor:
    a = _lift(a)

    def factory(_):
        def vjp(g):
            return _pairs((a, div(g, a)))
        return vjp

    return _register("log", (a,), np.log(a.value), np.log, factory)


def square(a) -> Tensor:
    a = _lift(a)

    def factory(_):
        def vjp(g):
            return _pairs((a, mul(g, mul(a, 2.0))))
        return vjp

    return _register("square", (a,), np.square(a.value), np.square, factory)


def sqrt(a) -> Tensor:
    a = _lift(a)

    def factory(out_t):
        def vjp(g):
            return _pairs((a, div(g, mul(out_t, 2.0))))
        return vjp

    return _register("sqrt", (a,), np.sqrt(a.value), np.sqrt, factory)


def l2norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm over ``axis`` (all axes when None).

    At an exactly-zero vector the norm is non-differentiable; the
    backward pass returns the zero subgradient there so a penalty that
    reaches its optimum keeps training defined.
    """
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    keep = _keep_shape(a.shape, axes)
    src_shape = a.shape

    def forward_fn(av):
        return np.sqrt(np.sum(np.square(av), axis=axes or None, keepdims=keepdims))

    out = forward_fn(a.value)

    def factory(out_t):
        def vjp(g):
            alive = (out_t.value != 0.0).astype(np.float64)   # constants by value
            bump = 1.0 - alive
            y_safe = add(out_t, bump)        # exact where norm > 0, 1 where it is 0
            gk = g if keepdims else reshape(g, keep)
            yk = y_safe if keepdims else reshape(y_safe, keep)
            coeff = div(mul(gk, alive.reshape(keep) if not keepdims else alive), yk)
            return _pairs((a, mul(broadcast(coeff, src_shape), a)))
        return vjp

    return _register("l2norm", (a,), out, forward_fn, factory)


# ---------------------------------------------------------------------------
# indexed ops

def gather(a, index) -> Tensor:
    """Pick one entry per row: out[i] = a[i, index[i]]."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"gather: expected 2-d input, got shape {a.shape}")
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    n, k = a.shape
    if idx.shape[0] != n:
        raise ShapeError(f"gather: index length {idx.shape[0]} != batch {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValueError(f"gather: index out of range [0, {k})")
    rows = np.arange(n)
    onehot = np.zeros((n, k))
    onehot[rows, idx] = 1.0

    def forward_fn(av):
        return av[rows, idx]

    def factory(_):
        def vjp(g):
            return _pairs((a, mul(broadcast(reshape(g, (n, 1)), (n, k)), onehot)))
        return vjp

    return _register("gather", (a,), a.value[rows, idx], forward_fn, factory)


def take(a, index) -> Tensor:
    """Column selection with repeats: out[:, j] = a[:, index[j]]."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"take: expected 2-d input, got shape {a.shape}")
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    width = a.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= width):
        raise ValueError(f"take: index out of range [0, {width})")

    def forward_fn(av):
        return np.asarray(av[:, idx], order="C")

    def factory(_):
        def vjp(g):
            return _pairs((a, scatter_add(g, idx, width)))
        return vjp

    return _register("take", (a,), forward_fn(a.value), forward_fn, factory)


def scatter_add(a, index, width: int) -> Tensor:
    """Adjoint of ``take``: out[:, index[j]] += a[:, j] into B x width zeros."""
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"scatter_add: expected 2-d input, got shape {a.shape}")
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if idx.shape[0] != a.shape[1]:
        raise ShapeError(f"scatter_add: index length {idx.shape[0]} != columns {a.shape[1]}")

    def forward_fn(av):
        out = np.zeros((av.shape[0], width))
        np.add.at(out, (slice(None), idx), av)
        return out

    def factory(_):
        def vjp(g):
            return _pairs((a, take(g, idx)))
        return vjp

    return _register("scatter_add", (a,), forward_fn(a.value), forward_fn, factory)


# ---------------------------------------------------------------------------
# convolution (composition of take / scatter_add / matmul; differentiable to
# any order because every building block is)

def _conv_indices(c: int, h: int, w: int, k: int, pad: int):
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    # where each unpadded pixel lands inside the padded buffer
    ch, hh, ww = np.meshgrid(np.arange(c), np.arange(h), np.arange(w), indexing="ij")
    embed = (ch * hp * wp + (hh + pad) * wp + (ww + pad)).reshape(-1)
    # im2col: rows are output positions, cols are (channel, dy, dx) patches
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    base = (oy * wp + ox).reshape(-1, 1)                      # L x 1
    cc, dy, dx = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    patch = (cc * hp * wp + dy * wp + dx).reshape(1, -1)      # 1 x (C*k*k)
    cols = (base + patch).reshape(-1)                         # L*C*k*k
    return embed, cols, hp, wp, ho, wo


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """2-d convolution, stride 1. x: B x C x H x W, w: F x C x k x k, b: F."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wdt = x.shape
    f, _, k, _ = w.shape
    embed, cols, hp, wp, ho, wo = _conv_indices(c, h, wdt, k, padding)

    flat = reshape(x, (n, c * h * wdt))
    padded = scatter_add(flat, embed, c * hp * wp) if padding > 0 else flat
    patches = reshape(take(padded, cols), (n * ho * wo, c * k * k))
    kernel = transpose(reshape(w, (f, c * k * k)))
    out = matmul(patches, kernel)
    if b is not None:
        out = add(out, _lift(b))
    out = reshape(out, (n, ho * wo, f))
    out = transpose(out, (0, 2, 1))
    return reshape(out, (n, f, ho, wo))


# ---------------------------------------------------------------------------
# recording entry point + backward

_DISPATCH = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "transpose": transpose, "reshape": reshape,
    "broadcast": broadcast, "sum": sum_, "mean": mean, "relu": relu,
    "exp": exp, "log": log, "logsumexp": logsumexp, "square": square,
    "sqrt": sqrt, "l2norm": l2norm, "gather": gather, "take": take,
    "scatter_add": scatter_add, "conv2d": conv2d,
}


def record(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name, recording it on the inputs' tape."""
    try:
        op = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"record: unknown op kind {kind!r}") from None
    return op(*inputs, **kwargs)


class GradientMap:
    """Gradients keyed by leaf node id; leaves the output never reached
    get an explicit zero gradient."""

    def __init__(self, grads: dict):
        self._grads = grads

    @staticmethod
    def _key(leaf) -> int:
        return leaf.node if isinstance(leaf, Tensor) else int(leaf)

    def __getitem__(self, leaf) -> Tensor:
        return self._grads[self._key(leaf)]

    def __contains__(self, leaf) -> bool:
        return self._key(leaf) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self):
        return self._grads.items()


def backward(tape: Tape, output: Tensor, wrt: Iterable[Tensor],
             create_graph: bool = False) -> GradientMap:
    """Gradients of a scalar ``output`` with respect to leaf tensors.

    With ``create_graph=True`` every backward computation is recorded on
    the tape, so the returned gradients are differentiable nodes.
    """
    if output.node is None or output.tape is not tape:
        raise ValueError("backward: output is not recorded on this tape")
    if output.size != 1:
        raise ShapeError(f"backward: output of shape {output.shape} is not a scalar")
    wrt = list(wrt)
    for leaf in wrt:
        if leaf.node is None or leaf.tape is not tape:
            raise ValueError("backward: wrt tensor is not on this tape")
        if not tape.is_leaf(leaf.node):
            raise ValueError(f"backward: node {leaf.node} is not a leaf")

    grads: dict[int, Tensor] = {output.node: Tensor(np.ones(output.shape))}
    previous = tape._recording
    tape._recording = bool(create_graph)
    try:
        for nid in range(output.node, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = tape.nodes[nid]
            if node.vjp is None:
                continue
            for pid, pg in node.vjp(g):
                held = grads.get(pid)
                grads[pid] = pg if held is None else add(held, pg)
    finally:
        tape._recording = previous

    out: dict[int, Tensor] = {}
    for leaf in wrt:
        g = grads.get(leaf.node)
        out[leaf.node] = g if g is not None else Tensor(np.zeros(leaf.shape))
    return GradientMap(out)


def grad_l2norm_of_grad(tape: Tape, energy: Tensor, input_leaf: Tensor) -> Tensor:
    """Differentiable ||d(energy)/d(input)||_2 as a tape node."""
    grad = backward(tape, energy, [input_leaf], create_graph=True)[input_leaf]
    return l2norm(grad)
