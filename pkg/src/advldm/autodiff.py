"""Small reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` numbers every operation applied to its :class:`Node` values
in creation order, so node ids are already a topological order and the
backward pass is a single reverse sweep over the nodes the loss depends on.
The graph holds its nodes weakly; intermediate values live only as long as
something downstream still references them.

Only the operations the toy latent diffusion model needs are provided. Binary
elementwise ops broadcast numpy-style and sum gradients back to each input's
shape; everything else is shape-strict.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("graph", "id", "value", "op", "parents", "vjp", "requires_grad", "__weakref__")

    def __init__(self, graph, nid, value, op, parents, vjp):
        self.graph = graph
        self.id = nid
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = op == "leaf" or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Append-only operation record."""

    def __init__(self):
        self._refs: list[weakref.ref] = []

    def __len__(self) -> int:
        return len(self._refs)

    def node(self, nid: int) -> Node:
        nid = int(nid)
        if not 0 <= nid < len(self._refs):
            raise IndexError(f"node id {nid} out of range (graph has {len(self._refs)} nodes)")
        node = self._refs[nid]()
        if node is None:
            raise LookupError(f"node {nid} is no longer referenced")
        return node

    def _record(self, value, op, parents=(), vjp=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{op} produced non-finite values (shape {value.shape})")
        node = Node(self, len(self._refs), value, op, tuple(parents), vjp)
        self._refs.append(weakref.ref(node))
        return node

    def leaf(self, value) -> Node:
        return self._record(np.array(value, dtype=np.float64), "leaf")

    def constant(self, value) -> Node:
        return self._record(np.array(value, dtype=np.float64), "const")

    def backward(self, loss, wrt: Iterable) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each node in ``wrt``.

        Returns a map from node id to gradient array. Nodes with no path to
        ``loss`` get exact zeros.
        """
        loss_node = self._resolve(loss)
        wrt_nodes = [self._resolve(w) for w in wrt]
        if loss_node.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss_node.shape}")

        reachable: dict[int, Node] = {}
        stack = [loss_node]
        while stack:
            node = stack.pop()
            if node.id not in reachable and node.requires_grad:
                reachable[node.id] = node
                stack.extend(node.parents)

        keep = {n.id for n in wrt_nodes}
        grads: dict[int, np.ndarray] = {loss_node.id: np.ones_like(loss_node.value)}
        for nid in sorted(reachable, reverse=True):
            node = reachable[nid]
            g = grads.get(nid) if nid in keep else grads.pop(nid, None)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return {n.id: grads.get(n.id, np.zeros_like(n.value)) for n in wrt_nodes}

    def _resolve(self, ref) -> Node:
        if isinstance(ref, Node):
            if ref.graph is not self:
                raise ValueError("node belongs to a different graph")
            return ref
        return self.node(ref)


def backward(graph: Graph, loss, wrt) -> dict[int, np.ndarray]:
    return graph.backward(loss, wrt)


# --------------------------------------------------------------------------
# helpers


def _graph_of(args) -> Graph:
    for a in args:
        if isinstance(a, Node):
            return a.graph
    raise TypeError("at least one operand must be a graph Node")


def _lift(graph: Graph, a) -> Node:
    if isinstance(a, Node):
        if a.graph is not graph:
            raise ValueError("operands belong to different graphs")
        return a
    return graph.constant(a)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape: tuple, axes: tuple) -> np.ndarray:
    # re-insert reduced axes so g broadcasts against the input
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("add", a, b)
    return g._record(
        a.value + b.value,
        "add",
        (a, b),
        lambda go: (_unbroadcast(go, a.shape), _unbroadcast(go, b.shape)),
    )


def sub(a, b) -> Node:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("sub", a, b)
    return g._record(
        a.value - b.value,
        "sub",
        (a, b),
        lambda go: (_unbroadcast(go, a.shape), -_unbroadcast(go, b.shape)),
    )


def mul(a, b) -> Node:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("mul", a, b)
    return g._record(
        a.value * b.value,
        "mul",
        (a, b),
        lambda go: (
            _unbroadcast(go * b.value, a.shape),
            _unbroadcast(go * a.value, b.shape),
        ),
    )


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.graph._record(a.value * c, "scale", (a,), lambda go: (go * c,))


def silu(a: Node) -> Node:
    s = _sigmoid(a.value)
    return a.graph._record(
        a.value * s, "silu", (a,), lambda go: (go * s * (1.0 + a.value * (1.0 - s)),)
    )


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return a.graph._record(s, "sigmoid", (a,), lambda go: (go * s * (1.0 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# reductions and norms


def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    axes = _axes(axis, a.value.ndim)
    return a.graph._record(
        a.value.sum(axis=axes), "sum", (a,), lambda go: (_expand(go, a.shape, axes).copy(),)
    )


def mean(a: Node, axis=None) -> Node:
    axes = _axes(axis, a.value.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return a.graph._record(
        a.value.mean(axis=axes),
        "mean",
        (a,),
        lambda go: (_expand(go, a.shape, axes) / count,),
    )


def mse(a, b, axis=None) -> Node:
    """Mean of squared differences over ``axis`` (all elements by default).

    ``b`` must match ``a`` in shape or be a scalar.
    """
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    if a.shape != b.shape and b.shape != ():
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    axes = _axes(axis, a.value.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    diff = a.value - b.value

    def vjp(go):
        ga = _expand(go, a.shape, axes) * (2.0 / count) * diff
        return ga, (-ga if b.shape == a.shape else -ga.sum())

    return g._record((diff * diff).mean(axis=axes), "mse", (a, b), vjp)


def l2norm(a: Node, axis=None) -> Node:
    """Euclidean norm; the gradient at an exactly-zero vector is taken as 0."""
    axes = _axes(axis, a.value.ndim)
    norm = np.sqrt((a.value * a.value).sum(axis=axes))

    def vjp(go):
        safe = np.where(norm > 0.0, norm, 1.0)
        scale_ = np.where(norm > 0.0, go / safe, 0.0)
        return (_expand(scale_, a.shape, axes) * a.value,)

    return a.graph._record(norm, "l2norm", (a,), vjp)


# --------------------------------------------------------------------------
# linear algebra and layout


def matmul(a, b) -> Node:
    g = _graph_of((a, b))
    a, b = _lift(g, a), _lift(g, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return g._record(
        a.value @ b.value,
        "matmul",
        (a, b),
        lambda go: (go @ b.value.T, a.value.T @ go),
    )


def linear(x, w, b=None) -> Node:
    """``x @ w.T + b`` for ``x`` of shape (batch, in) and ``w`` of shape (out, in)."""
    g = _graph_of((x, w, b))
    x, w = _lift(g, x), _lift(g, w)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    parents = [x, w]
    out = x.value @ w.value.T
    if b is not None:
        b = _lift(g, b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
        out = out + b.value
        parents.append(b)

    def vjp(go):
        grads = [go @ w.value, go.T @ x.value]
        if b is not None:
            grads.append(go.sum(axis=0))
        return grads

    return g._record(out, "linear", parents, vjp)


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return a.graph._record(out, "reshape", (a,), lambda go: (go.reshape(a.shape),))


def concat_channel(parts: Sequence[Node]) -> Node:
    g = _graph_of(parts)
    parts = [_lift(g, p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.value.ndim != len(ref) or p.shape[:1] + p.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"concat_channel: incompatible shapes {ref} and {p.shape}")
    sizes = np.cumsum([p.shape[1] for p in parts])[:-1]
    return g._record(
        np.concatenate([p.value for p in parts], axis=1),
        "concat_channel",
        parts,
        lambda go: tuple(np.split(go, sizes, axis=1)),
    )


def upsample2x(a: Node) -> Node:
    """Nearest-neighbour upsampling of an NCHW tensor by 2 in H and W."""
    if a.value.ndim != 4:
        raise ShapeError(f"upsample2x: expected NCHW input, got shape {a.shape}")
    n, c, h, w = a.shape
    out = a.value.repeat(2, axis=2).repeat(2, axis=3)
    return a.graph._record(
        out,
        "upsample2x",
        (a,),
        lambda go: (go.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),),
    )


def conv2d(x, w, b=None, stride: int = 1) -> Node:
    """NCHW cross-correlation with zero padding ``k // 2`` (k = 1 or 3)."""
    g = _graph_of((x, w, b))
    x, w = _lift(g, x), _lift(g, w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c or kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    k = kh
    pad = k // 2
    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.value
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = w.value.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = _lift(g, b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out = out + b.value[None, :, None, None]
        parents.append(b)

    def vjp(go):
        gmat = go.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        grads = [None, gw]
        if b is not None:
            grads.append(go.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return grads
        # input gradient: full correlation of the stride-dilated output
        # gradient with the spatially flipped, channel-transposed kernel
        if stride > 1:
            gd = np.zeros((n, o, stride * (ho - 1) + 1, stride * (wo - 1) + 1))
            gd[:, :, ::stride, ::stride] = go
        else:
            gd = go
        gd = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1))) if k > 1 else gd
        gcols, gh, gwd = _im2col(gd, k, 1)
        wflip = w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
        gpart = (wflip @ gcols).reshape(c, n, gh, gwd).transpose(1, 0, 2, 3)
        gx = gpart[:, :, pad : pad + h, pad : pad + wd]
        if gx.shape[2:] != (h, wd):
            gx = np.pad(gx, ((0, 0), (0, 0), (0, h - gx.shape[2]), (0, wd - gx.shape[3])))
        grads[0] = gx
        return grads

    return g._record(out, "conv2d", parents, vjp)


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Columns of shape (C*k*k, N*Ho*Wo) for a pre-padded NCHW array."""
    n, c = xp.shape[:2]
    if k == 1:
        sub = xp[:, :, ::stride, ::stride]
        ho, wo = sub.shape[2:]
        return np.ascontiguousarray(sub.transpose(1, 0, 2, 3)).reshape(c, n * ho * wo), ho, wo
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


# --------------------------------------------------------------------------
# checking


def finite_diff_check(
    f: Callable[[Node], Node],
    x: np.ndarray,
    h: float = 1e-5,
    n_coords: int = 100,
    rng=None,
) -> float:
    """Max relative error between the reverse-mode gradient and central differences.

    ``f`` maps a leaf node to a scalar node. Coordinates are drawn without
    replacement with ``rng`` (an :class:`advldm.rng.Rng`), or taken in order
    when no generator is given.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    if n_coords > x.size:
        raise ValueError(f"n_coords={n_coords} exceeds element count {x.size}")

    g = Graph()
    leaf = g.leaf(x)
    grad = g.backward(f(leaf), [leaf])[leaf.id].reshape(-1)
    coords = np.arange(n_coords) if rng is None else rng.choice(x.size, n_coords)

    def value(arr):
        try:
            return float(f(Graph().leaf(arr)).value)
        except NumericError as exc:
            raise NumericError(f"non-finite function value during finite differences: {exc}")

    flat = x.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = value(x)
        flat[i] = orig - h
        fm = value(x)
        flat[i] = orig
        central = (fp - fm) / (2.0 * h)
        analytic = grad[i]
        denom = max(abs(analytic), abs(central), 1e-8)
        worst = max(worst, abs(analytic - central) / denom)
    return worst
