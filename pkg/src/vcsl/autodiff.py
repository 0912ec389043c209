"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Graph` is active are appended to its tape
in execution order, which is already a topological order. ``Graph.backward``
walks the tape in reverse and applies the adjoint rule registered for each
primitive in :data:`ADJOINTS`.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a 0-d scalar, or an operand whose shape is a trailing block of the
other's (a row bias being the usual case). Matmul accepts
equal batch dimensions or a 2-D operand shared across the batch.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable

import numpy as np

__all__ = [
    "ADJOINTS",
    "AutodiffError",
    "Graph",
    "GraphStateError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "ZeroNormError",
    "backward",
    "check_gradient",
    "evaluate",
    "no_grad",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, node_id: int | None, message: str):
        self.op = op
        self.node_id = node_id
        super().__init__(f"{op} (node {node_id}): {message}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str, node_id: int | None):
        self.op = op
        self.node_id = node_id
        super().__init__(f"non-finite value produced by {op} (node {node_id})")


class ZeroNormError(AutodiffError, ValueError):
    """Raised when normalizing a vector whose norm is zero."""


class GraphStateError(AutodiffError, RuntimeError):
    pass


_local = threading.local()


def _stack() -> list:
    try:
        return _local.stack
    except AttributeError:
        _local.stack = []
        return _local.stack


def _active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Evaluate operations without recording them on any graph."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("division is only supported by python scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    __slots__ = ("id", "op", "parents", "out", "ctx")

    def __init__(self, node_id: int, op: str, parents: tuple, out: np.ndarray, ctx: dict):
        self.id = node_id
        self.op = op
        self.parents = parents
        self.out = out
        self.ctx = ctx

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op})"


class Graph:
    """Tape of primitive nodes plus an optional re-runnable program.

    Used directly as a context manager (``with graph: loss = ...``) or built
    from a function ``fn(**tensors)`` so that :meth:`evaluate` can re-run the
    same computation on fresh or perturbed inputs.
    """

    def __init__(self, fn: Callable | None = None, check_finite: bool = True):
        self.fn = fn
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] | None = None
        self._forward_done = False

    def __enter__(self) -> Graph:
        _stack().append(self)
        self._forward_done = True
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def reset(self) -> None:
        self.nodes.clear()
        self.leaves.clear()
        self._leaf_ids.clear()
        self._forward_done = False

    def watch(self, tensor: Tensor) -> Tensor:
        """Register a leaf so it receives a (possibly zero) gradient."""
        if tensor.node is None and tensor.requires_grad and id(tensor) not in self._leaf_ids:
            self._leaf_ids.add(id(tensor))
            self.leaves.append(tensor)
        return tensor

    def _record(self, op: str, parents: tuple, out: np.ndarray, ctx: dict) -> Node:
        for p in parents:
            if p.node is None:
                self.watch(p)
        node = Node(len(self.nodes), op, parents, out, ctx)
        self.nodes.append(node)
        return node

    def evaluate(self, inputs: dict | None = None, record: bool = True) -> dict[str, Tensor]:
        if self.fn is None:
            raise GraphStateError("graph has no program to evaluate")
        if inputs is not None:
            self.inputs = {
                k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True, name=k)
                for k, v in inputs.items()
            }
        if record:
            self.reset()
            with self:
                for t in self.inputs.values():
                    self.watch(t)
                out = self.fn(**self.inputs)
        else:
            with no_grad():
                out = self.fn(**self.inputs)
        if isinstance(out, Tensor):
            out = {"output": out}
        if record:
            self.outputs = out
        return out

    def backward(self, loss: Tensor | str) -> dict[str, np.ndarray]:
        """Populate ``grad`` on every leaf of the tape; return grads of named inputs."""
        if isinstance(loss, str):
            if self.outputs is None or loss not in self.outputs:
                raise GraphStateError(f"no evaluated output named {loss!r}")
            loss = self.outputs[loss]
        if not self._forward_done:
            raise GraphStateError("backward called before forward evaluation")
        if loss.shape != ():
            raise ShapeError("backward", None, f"loss must be a scalar, got shape {loss.shape}")
        for leaf in self.leaves:
            leaf.grad = np.zeros_like(leaf.data)
        if loss.node is not None:
            if loss.node.id >= len(self.nodes) or self.nodes[loss.node.id] is not loss.node:
                raise GraphStateError("loss was not produced by this graph")
            pending: dict[int, np.ndarray] = {loss.node.id: np.ones(())}
            for node in reversed(self.nodes[: loss.node.id + 1]):
                g = pending.pop(node.id, None)
                if g is None:
                    continue
                parent_grads = ADJOINTS[node.op](g, node)
                for parent, pg in zip(node.parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent.node is None:
                        parent.grad += pg
                    elif parent.node.id in pending:
                        pending[parent.node.id] = pending[parent.node.id] + pg
                    else:
                        pending[parent.node.id] = pg
        elif loss.requires_grad:
            loss.grad = np.ones(())
        return {k: t.grad for k, t in self.inputs.items() if t.grad is not None}


def evaluate(graph: Graph, inputs: dict) -> dict[str, Tensor]:
    return graph.evaluate(inputs)


def backward(graph: Graph, loss: Tensor | str) -> dict[str, np.ndarray]:
    return graph.backward(loss)


def check_gradient(
    graph: Graph,
    loss: str = "output",
    tensor: Tensor | str | None = None,
    step: float = 1e-5,
    coords=None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``tensor`` is a named input of the graph or any leaf Tensor used by its
    program (e.g. a model parameter captured in a closure). ``coords`` limits
    the check to the given flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if graph.outputs is None:
        graph.evaluate()
    if isinstance(tensor, str):
        tensor = graph.inputs[tensor]
    if tensor is None or tensor.size == 0:
        raise ShapeError("check_gradient", None, "cannot check a zero-size tensor")
    if not np.all(np.isfinite(tensor.data)):
        raise ValueError("tensor values must be finite")
    graph.evaluate()
    graph.backward(loss)
    # a tensor the loss never touched may still carry a grad from another graph
    on_tape = id(tensor) in graph._leaf_ids
    analytic = tensor.grad.copy() if on_tape else np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    # probes skip per-op finiteness checks; a non-finite loss still yields inf below
    _local.unchecked = True
    try:
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = graph.evaluate(record=False)[loss].item()
            flat[i] = orig - step
            down = graph.evaluate(record=False)[loss].item()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - fd) / max(1.0, abs(a))
            if not math.isfinite(err):
                return math.inf
            worst = max(worst, err)
    finally:
        _local.unchecked = False
    return worst


# ---------------------------------------------------------------------------
# primitive machinery

ADJOINTS: dict[str, Callable[[np.ndarray, Node], tuple]] = {}


def adjoint(op: str):
    def register(fn):
        ADJOINTS[op] = fn
        return fn

    return register


def _all_finite(x: np.ndarray) -> bool:
    # one reduction: any inf/nan makes the sum non-finite; overflow falls back to the full check
    if x.dtype.kind != "f" or math.isfinite(np.add.reduce(x, axis=None)):
        return True
    return bool(np.isfinite(x).all())


def _emit(op: str, out: np.ndarray, parents: tuple, ctx: dict | None = None) -> Tensor:
    graph = _active_graph()
    node_id = len(graph.nodes) if graph is not None else None
    if (graph is None or graph.check_finite) and not getattr(_local, "unchecked", False) \
            and not _all_finite(out):
        raise NonFiniteError(op, node_id)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.requires_grad = graph is not None and any(p.requires_grad for p in parents)
    t.node = graph._record(op, parents, out, ctx or {}) if t.requires_grad else None
    return t


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.shape == () or a.shape == ():
        return
    # one operand may match a trailing block of the other's shape (row bias etc.)
    lo, hi = (a, b) if a.ndim < b.ndim else (b, a)
    if hi.shape[hi.ndim - lo.ndim:] == lo.shape:
        return
    graph = _active_graph()
    raise ShapeError(op, len(graph.nodes) if graph else None, f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


@adjoint("add")
def _add_adj(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


@adjoint("sub")
def _sub_adj(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b))


@adjoint("mul")
def _mul_adj(g, node):
    a, b = node.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _emit("scale", x.data * c, (x,), {"c": c})


@adjoint("scale")
def _scale_adj(g, node):
    return (g * node.ctx["c"],)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and a.ndim > 2 and b.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        graph = _active_graph()
        raise ShapeError("matmul", len(graph.nodes) if graph else None, f"cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", np.matmul(a.data, b.data), (a, b))


@adjoint("matmul")
def _matmul_adj(g, node):
    a, b = node.parents
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


def transpose(x: Tensor, axes: tuple | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return _emit("transpose", np.transpose(x.data, axes), (x,), {"axes": axes})


@adjoint("transpose")
def _transpose_adj(g, node):
    return (np.transpose(g, np.argsort(node.ctx["axes"])),)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        graph = _active_graph()
        raise ShapeError("reshape", len(graph.nodes) if graph else None, str(err)) from None
    return _emit("reshape", out, (x,))


@adjoint("reshape")
def _reshape_adj(g, node):
    return (g.reshape(node.parents[0].shape),)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,))


@adjoint("exp")
def _exp_adj(g, node):
    return (g * node.out,)


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", out, (x,))


@adjoint("log")
def _log_adj(g, node):
    return (g / node.parents[0].data,)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _emit("tanh", np.tanh(x.data), (x,))


@adjoint("tanh")
def _tanh_adj(g, node):
    return (g * (1.0 - node.out**2),)


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("silu", x.data * sig, (x,), {"sig": sig})


@adjoint("silu")
def _silu_adj(g, node):
    sig = node.ctx["sig"]
    x = node.parents[0].data
    return (g * sig * (1.0 + x * (1.0 - sig)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _emit("softmax", e / e.sum(axis=axis, keepdims=True), (x,), {"axis": axis})


@adjoint("softmax")
def _softmax_adj(g, node):
    s = node.out
    axis = node.ctx["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _emit("log_softmax", out, (x,), {"axis": axis})


@adjoint("log_softmax")
def _log_softmax_adj(g, node):
    axis = node.ctx["axis"]
    return (g - np.exp(node.out) * g.sum(axis=axis, keepdims=True),)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroNormError("cannot L2-normalize a zero vector")
    return _emit("l2_normalize", x.data / norm, (x,), {"axis": axis, "norm": norm})


@adjoint("l2_normalize")
def _l2_normalize_adj(g, node):
    y = node.out
    axis = node.ctx["axis"]
    return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / node.ctx["norm"],)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the adjoint at a zero vector is taken as 0."""
    x = as_tensor(x)
    return _emit("norm", np.sqrt((x.data**2).sum(axis=axis)), (x,), {"axis": axis})


@adjoint("norm")
def _norm_adj(g, node):
    axis = node.ctx["axis"]
    n = np.expand_dims(node.out, axis)
    safe = np.where(n > 0, n, 1.0)
    return (np.where(n > 0, np.expand_dims(g, axis) * node.parents[0].data / safe, 0.0),)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    return _emit("layer_norm", xc * inv, (x,), {"inv": inv})


@adjoint("layer_norm")
def _layer_norm_adj(g, node):
    y = node.out
    inv = node.ctx["inv"]
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * y).mean(axis=-1, keepdims=True)
    return (inv * (g - gm - y * gy),)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        graph = _active_graph()
        raise ShapeError("concat", len(graph.nodes) if graph else None, str(err)) from None
    sizes = [t.shape[axis] for t in tensors]
    return _emit("concat", out, tensors, {"axis": axis, "splits": np.cumsum(sizes)[:-1]})


@adjoint("concat")
def _concat_adj(g, node):
    return tuple(np.split(g, node.ctx["splits"], axis=node.ctx["axis"]))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,),
                 {"axis": axis, "keepdims": keepdims})


@adjoint("sum")
def _sum_adj(g, node):
    x = node.parents[0]
    axis = node.ctx["axis"]
    if axis is not None and not node.ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return _emit("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,),
                 {"axis": axis, "keepdims": keepdims, "count": count})


@adjoint("mean")
def _mean_adj(g, node):
    x = node.parents[0]
    axis = node.ctx["axis"]
    if axis is not None and not node.ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / node.ctx["count"], x.shape).copy(),)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (rows by default)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    return _emit("take", np.take(x.data, index, axis=axis), (x,), {"index": index, "axis": axis})


@adjoint("take")
def _take_adj(g, node):
    x = node.parents[0]
    axis = node.ctx["axis"] % x.ndim
    out = np.zeros_like(x.data)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, node.ctx["index"], np.moveaxis(g, axis, 0))
    return (out,)


def mask_rows(x: Tensor, mask, token: Tensor) -> Tensor:
    """Replace rows (axis -2) of ``x`` flagged in ``mask`` by the vector ``token``."""
    x, token = as_tensor(x), as_tensor(token)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim < 2 or mask.shape != x.shape[:-1] or token.shape != x.shape[-1:]:
        graph = _active_graph()
        raise ShapeError("mask_rows", len(graph.nodes) if graph else None,
                         f"mask {mask.shape} / token {token.shape} do not fit input {x.shape}")
    out = np.where(mask[..., None], token.data, x.data)
    return _emit("mask_rows", out, (x, token), {"mask": mask})


@adjoint("mask_rows")
def _mask_rows_adj(g, node):
    m = node.ctx["mask"][..., None]
    gx = np.where(m, 0.0, g)
    gt = np.where(m, g, 0.0).reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, gt


def interp1d(y: Tensor, positions: Tensor) -> Tensor:
    """Linearly interpolate rows of ``y`` at real-valued ``positions``.

    ``y`` is ``(D, F)`` with positions of any shape ``S`` (output ``S + (F,)``)
    or batched ``(B, D, F)`` with positions ``(B, P)`` (output ``(B, P, F)``).
    Positions are clamped to ``[0, D - 1]``; the clamp has zero derivative
    outside that interval.
    """
    y, positions = as_tensor(y), as_tensor(positions)
    graph = _active_graph()
    if np.any(np.isnan(positions.data)):
        raise ValueError("interp1d received NaN positions")
    batched = y.ndim == 3
    if y.ndim not in (2, 3) or y.shape[-2] == 0 or (batched and (positions.ndim != 2 or positions.shape[0] != y.shape[0])):
        raise ShapeError("interp1d", len(graph.nodes) if graph else None,
                         f"cannot sample {y.shape} at positions {positions.shape}")
    d = y.shape[-2]
    pos = np.clip(positions.data, 0.0, d - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), max(d - 2, 0))
    hi = np.minimum(lo + 1, d - 1)
    frac = pos - lo
    if batched:
        rows = np.arange(y.shape[0])[:, None]
        y_lo, y_hi = y.data[rows, lo], y.data[rows, hi]
    else:
        y_lo, y_hi = y.data[lo], y.data[hi]
    out = (1.0 - frac)[..., None] * y_lo + frac[..., None] * y_hi
    inside = (positions.data >= 0.0) & (positions.data <= d - 1)
    ctx = {"lo": lo, "hi": hi, "frac": frac, "inside": inside, "diff": y_hi - y_lo, "batched": batched}
    return _emit("interp1d", out, (y, positions), ctx)


@adjoint("interp1d")
def _interp1d_adj(g, node):
    y, positions = node.parents
    c = node.ctx
    gy = gp = None
    if y.requires_grad:
        gy = np.zeros_like(y.data)
        w_lo = (1.0 - c["frac"])[..., None] * g
        w_hi = c["frac"][..., None] * g
        if c["batched"]:
            rows = np.broadcast_to(np.arange(y.shape[0])[:, None], c["lo"].shape)
            np.add.at(gy, (rows, c["lo"]), w_lo)
            np.add.at(gy, (rows, c["hi"]), w_hi)
        else:
            f = y.shape[-1]
            np.add.at(gy, c["lo"].reshape(-1), w_lo.reshape(-1, f))
            np.add.at(gy, c["hi"].reshape(-1), w_hi.reshape(-1, f))
    if positions.requires_grad:
        gp = np.where(c["inside"], (g * c["diff"]).sum(axis=-1), 0.0)
    return gy, gp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x (B, C, H, W)`` with ``w (O, C, k, k)`` plus per-channel ``bias (O,)``."""
    x, w = as_tensor(x), as_tensor(w)
    bias = as_tensor(np.zeros(w.shape[0]) if bias is None else bias)
    if (x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]
            or bias.shape != (w.shape[0],)):
        graph = _active_graph()
        raise ShapeError("conv2d", len(graph.nodes) if graph else None,
                         f"cannot convolve {x.shape} with kernel {w.shape}")
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        graph = _active_graph()
        raise ShapeError("conv2d", len(graph.nodes) if graph else None, "kernel larger than padded input")
    # columns laid out as (B, Ho, Wo, C, k, k) so they match w.reshape(O, C*k*k)
    cols = np.empty((b, ho, wo, c, k, k))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            cols[..., di, dj] = patch.transpose(0, 2, 3, 1)
    cols = cols.reshape(b * ho * wo, c * k * k)
    out = (cols @ w.data.reshape(o, -1).T + bias.data).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    ctx = {"cols": cols, "stride": stride, "padding": padding, "out_hw": (ho, wo)}
    return _emit("conv2d", np.ascontiguousarray(out), (x, w, bias), ctx)


@adjoint("conv2d")
def _conv2d_adj(g, node):
    x, w, bias = node.parents
    c = node.ctx
    b, ch, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = c["out_hw"]
    s, p = c["stride"], c["padding"]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = gx = None
    gb = g2.sum(axis=0) if bias.requires_grad else None
    if w.requires_grad:
        gw = (g2.T @ c["cols"]).reshape(w.shape)
    if x.requires_grad:
        gcols = (g2 @ w.data.reshape(o, -1)).reshape(b, ho, wo, ch, k, k)
        gxp = np.zeros((b, ch, h + 2 * p, wd + 2 * p))
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + s * ho:s, dj:dj + s * wo:s] += gcols[..., di, dj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + wd]
    return gx, gw, gb
