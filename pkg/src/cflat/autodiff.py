"""Reverse-mode automatic differentiation with exact Hessian-vector products.

The engine is a dynamically built tape of `Tensor` nodes over float64 numpy
arrays. Every op's backward rule (vjp) is itself expressed in terms of these
ops, so a gradient is again a differentiable graph node; differentiating the
scalar g.v a second time yields exact HVPs without forming the Hessian.

Supported builder-facing ops: add, sub, mul, div (numpy broadcasting incl.
scalars), matmul, relu, tanh, exp, log, fused softmax cross-entropy, sum,
mean. Internal adjoint plumbing (transpose, reshape, slice/embed, column
concat) is not part of the public op set.

Conventions:
  - relu's second derivative is 0 everywhere, including the kink at 0.
  - reductions use numpy's fixed deterministic summation order, so replaying
    a graph with identical leaf values is bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NonFiniteError
from .params import ParamVector

__all__ = [
    "Tensor",
    "const",
    "concat_cols",
    "softmax_cross_entropy",
    "backward",
    "CompGraph",
    "gradient",
    "hvp",
    "fd_gradient_oracle",
]

# Active trace stack; when non-empty, Tensor construction is recorded.
_TRACE: list["_Trace"] = []


class _Trace:
    def __init__(self):
        self.records = []  # (op, parent indices)
        self.values = []
        self.index = {}  # id(tensor) -> node index

    def add(self, tensor):
        idx = len(self.records)
        self.index[id(tensor)] = idx
        parents = tuple(self.index.get(id(p), -1) for p in tensor.parents)
        self.records.append((tensor.op, parents))
        self.values.append(tensor.value)


class Tensor:
    """One node of the computation graph: a float64 array plus its provenance."""

    __slots__ = ("value", "parents", "_vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        if isinstance(value, np.ndarray) and value.dtype == np.float64:
            self.value = value
        else:
            self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self._vjp = vjp
        self.op = op
        if _TRACE:
            _TRACE[-1].add(self)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    # arithmetic sugar; non-Tensor operands become constants
    def __add__(self, other):
        return add(self, _ensure(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _ensure(other))

    def __rsub__(self, other):
        return sub(_ensure(other), self)

    def __mul__(self, other):
        return mul(self, _ensure(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _ensure(other))

    def __rtruediv__(self, other):
        return div(_ensure(other), self)

    def __matmul__(self, other):
        return matmul(self, _ensure(other))

    def __neg__(self):
        return neg(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return t_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


def const(value) -> Tensor:
    return Tensor(value, op="const")


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Adjoint of numpy broadcasting: reduce g back to `shape`."""
    if g.value.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = t_sum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (have, want) in enumerate(zip(g.value.shape, shape)) if want == 1 and have != 1
    )
    if axes:
        g = t_sum(g, axis=axes, keepdims=True)
    if g.value.shape != shape:
        g = reshape(g, shape)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g, needs):
        return (
            _sum_to(g, a.value.shape) if needs[0] else None,
            _sum_to(g, b.value.shape) if needs[1] else None,
        )

    return Tensor(a.value + b.value, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g, needs):
        return (
            _sum_to(g, a.value.shape) if needs[0] else None,
            _sum_to(neg(g), b.value.shape) if needs[1] else None,
        )

    return Tensor(a.value - b.value, (a, b), vjp, "sub")


def neg(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (neg(g),)

    return Tensor(-a.value, (a,), vjp, "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g, needs):
        return (
            _sum_to(mul(g, b), a.value.shape) if needs[0] else None,
            _sum_to(mul(g, a), b.value.shape) if needs[1] else None,
        )

    return Tensor(a.value * b.value, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g, needs):
        ga = _sum_to(div(g, b), a.value.shape) if needs[0] else None
        gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.value.shape) if needs[1] else None
        return (ga, gb)

    return Tensor(a.value / b.value, (a, b), vjp, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractViolation(
            f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return Tensor(a.value @ b.value, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ContractViolation(f"transpose expects a 2-D tensor, got shape {a.value.shape}")

    def vjp(g, needs):
        return (transpose(g),)

    return Tensor(np.ascontiguousarray(a.value.T), (a,), vjp, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.value.shape

    def vjp(g, needs):
        return (reshape(g, orig),)

    return Tensor(a.value.reshape(shape), (a,), vjp, "reshape")


def relu(a: Tensor) -> Tensor:
    # Subgradient convention: derivative 0 at the kink, second derivative 0 everywhere.
    mask = const((a.value > 0).astype(np.float64))

    def vjp(g, needs):
        return (mul(g, mask),)

    return Tensor(np.maximum(a.value, 0.0), (a,), vjp, "relu")


def tanh(a: Tensor) -> Tensor:
    out_value = np.tanh(a.value)

    def vjp(g, needs):
        return (mul(g, sub(const(1.0), mul(out, out))),)

    out = Tensor(out_value, (a,), vjp, "tanh")
    return out


def exp(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (mul(g, out),)

    out = Tensor(np.exp(a.value), (a,), vjp, "exp")
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g, needs):
        return (div(g, a),)

    return Tensor(np.log(a.value), (a,), vjp, "log")


def t_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def vjp(g, needs):
        gg = g
        if axis is not None and not keepdims:
            kshape = list(a.value.shape)
            axes = (axis,) if isinstance(axis, int) else axis
            for ax in axes:
                kshape[ax] = 1
            gg = reshape(gg, tuple(kshape))
        return (mul(gg, const(np.ones_like(a.value))),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor) -> Tensor:
    return mul(t_sum(a), const(1.0 / a.value.size))


def dot(a: Tensor, b: Tensor) -> Tensor:
    return t_sum(mul(a, b))


def take(a: Tensor, offset: int, length: int) -> Tensor:
    if a.value.ndim != 1:
        raise ContractViolation("take expects a 1-D tensor")
    total = a.value.size

    def vjp(g, needs):
        return (embed(g, offset, total),)

    return Tensor(a.value[offset : offset + length], (a,), vjp, "take")


def embed(a: Tensor, offset: int, total: int) -> Tensor:
    length = a.value.size

    def vjp(g, needs):
        return (take(g, offset, length),)

    padded = np.zeros(total, dtype=np.float64)
    padded[offset : offset + length] = a.value
    return Tensor(padded, (a,), vjp, "embed")


def take_cols(a: Tensor, start: int, width: int) -> Tensor:
    if a.value.ndim != 2:
        raise ContractViolation("take_cols expects a 2-D tensor")
    total = a.value.shape[1]

    def vjp(g, needs):
        return (embed_cols(g, start, total),)

    return Tensor(np.ascontiguousarray(a.value[:, start : start + width]), (a,), vjp, "take_cols")


def embed_cols(a: Tensor, start: int, total: int) -> Tensor:
    rows, width = a.value.shape

    def vjp(g, needs):
        return (take_cols(g, start, width),)

    padded = np.zeros((rows, total), dtype=np.float64)
    padded[:, start : start + width] = a.value
    return Tensor(padded, (a,), vjp, "embed_cols")


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractViolation("concat_cols of no tensors")
    widths = [p.value.shape[1] for p in parts]
    starts = np.concatenate([[0], np.cumsum(widths)])[:-1]

    def vjp(g, needs):
        return tuple(
            take_cols(g, int(s), w) if need else None
            for s, w, need in zip(starts, widths, needs)
        )

    value = np.concatenate([p.value for p in parts], axis=1)
    return Tensor(value, tuple(parts), vjp, "concat_cols")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Fused mean cross-entropy between softmax(logits) and constant target rows.

    Targets are probability rows (one-hot for hard labels, soft for
    distillation). The forward value is computed with a log-sum-exp shift so
    log(0) never occurs; the backward rule rebuilds softmax from graph ops so
    second-order differentiation stays exact.
    """
    t = np.asarray(targets, dtype=np.float64)
    if logits.value.ndim != 2 or t.shape != logits.value.shape:
        raise ContractViolation(
            f"targets shape {t.shape} must match 2-D logits {logits.value.shape}"
        )
    row_sums = t.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-8):
        raise ContractViolation("each target row must sum to 1")

    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    batch = z.shape[0]
    value = np.asarray(np.mean(lse - (t * z).sum(axis=1)))

    def vjp(g, needs):
        shifted = sub(logits, const(zmax))  # constant shift: gradient-transparent
        e = exp(shifted)
        p = div(e, t_sum(e, axis=1, keepdims=True))
        scale = mul(g, const(1.0 / batch))
        return (mul(sub(p, const(t)), scale),)

    return Tensor(value, (logits,), vjp, "softmax_ce")


def _toposort(root: Tensor) -> list[Tensor]:
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def backward(output: Tensor, wrt: list[Tensor]) -> list[Tensor]:
    """Reverse sweep from a scalar output; returns one gradient Tensor per wrt.

    The returned gradients are ordinary graph nodes, so they can be
    differentiated again (this is how exact HVPs are computed).
    """
    if output.value.size != 1:
        raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")
    topo = _toposort(output)
    wrt_ids = {id(w) for w in wrt}

    # Only propagate into nodes that transitively depend on some wrt tensor.
    relevant = set(wrt_ids)
    for node in topo:  # parents precede children in topo order
        if id(node) not in relevant and any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    grads: dict[int, Tensor] = {id(output): const(np.ones_like(output.value))}
    for node in reversed(topo):
        if node._vjp is None or id(node) not in relevant:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        needs = tuple(id(p) in relevant for p in node.parents)
        if not any(needs):
            continue
        for parent, pgrad, need in zip(node.parents, node._vjp(g, needs), needs):
            if not need or pgrad is None:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pgrad if held is None else add(held, pgrad)

    return [
        grads.get(id(w)) if grads.get(id(w)) is not None else const(np.zeros_like(w.value))
        for w in wrt
    ]


class CompGraph:
    """Replayable scalar-loss computation over one flat parameter leaf.

    `builder` maps a 1-D leaf Tensor of length `leaf_count` to a scalar loss
    Tensor. It is re-executed on every evaluation (replay); any data it uses
    must be captured as constants, so identical leaf values reproduce
    bit-identical node values.
    """

    def __init__(self, builder, leaf_count: int, example=None):
        self.builder = builder
        self.leaf_count = int(leaf_count)
        if example is not None:
            self._run(self._coerce(example))

    def _coerce(self, at) -> np.ndarray:
        arr = at.data if isinstance(at, ParamVector) else np.asarray(at, dtype=np.float64).ravel()
        if arr.size != self.leaf_count:
            raise ContractViolation(
                f"graph has {self.leaf_count} leaves but got vector of length {arr.size}"
            )
        return arr

    def _run(self, arr: np.ndarray) -> tuple[Tensor, Tensor]:
        leaf = Tensor(arr, op="leaf")
        out = self.builder(leaf)
        if not isinstance(out, Tensor) or out.value.size != 1:
            raise ContractViolation("graph builder must produce a scalar Tensor loss")
        return leaf, out

    def value(self, at) -> float:
        arr = self._coerce(at)
        _, out = self._run(arr)
        v = float(out.value.reshape(()))
        if not np.isfinite(v):
            node, op = self._first_non_finite(arr)
            raise NonFiniteError(
                f"loss is non-finite; first non-finite node {node} (op {op!r})",
                stage="loss",
                node=node,
            )
        return v

    def trace(self, at) -> _Trace:
        """Replay with node recording; used for invariants and diagnostics."""
        arr = self._coerce(at)
        tr = _Trace()
        _TRACE.append(tr)
        try:
            self._run(arr)
        finally:
            _TRACE.pop()
        return tr

    def nodes(self, at) -> list[tuple[str, tuple[int, ...]]]:
        """Ordered op records (op kind, parent indices) for an evaluation."""
        return list(self.trace(at).records)

    def trace_values(self, at) -> list[np.ndarray]:
        return list(self.trace(at).values)

    def _first_non_finite(self, arr) -> tuple[int, str]:
        tr = self.trace(arr)
        for i, v in enumerate(tr.values):
            if not np.all(np.isfinite(v)):
                return i, tr.records[i][0]
        return -1, "?"


def _like(at, data: np.ndarray):
    return at.like(data) if isinstance(at, ParamVector) else data


def gradient(graph: CompGraph, at):
    """Exact reverse-mode gradient of the graph's loss at `at`."""
    arr = graph._coerce(at)
    leaf, out = graph._run(arr)
    if not np.isfinite(out.value):
        node, op = graph._first_non_finite(arr)
        raise NonFiniteError(
            f"loss is non-finite at gradient point; node {node} (op {op!r})",
            stage="loss",
            node=node,
        )
    (g,) = backward(out, [leaf])
    return _like(at, np.array(g.value, dtype=np.float64))


def hvp(graph: CompGraph, at, v, method: str = "exact", fd_step: float = 1e-4):
    """Hessian-vector product of the graph's loss at `at` with direction `v`.

    method "exact": differentiate g.v a second time (nested reverse mode).
    method "fd": central difference of gradients with step `fd_step` along v,
    i.e. (grad(at + h v) - grad(at - h v)) / (2 h); error is O(h^2 |v|^3).
    """
    arr = graph._coerce(at)
    v_arr = v.data if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64).ravel()
    if v_arr.size == 0:
        raise ContractViolation("hvp direction must be non-empty")
    if v_arr.size != arr.size:
        raise ContractViolation(f"direction length {v_arr.size} != parameter length {arr.size}")

    if method == "exact":
        leaf, out = graph._run(arr)
        (g,) = backward(out, [leaf])
        s = dot(g, const(v_arr))
        (h,) = backward(s, [leaf])
        return _like(at, np.array(h.value, dtype=np.float64))
    if method == "fd":
        h = float(fd_step)
        g_plus = gradient(graph, arr + h * v_arr)
        g_minus = gradient(graph, arr - h * v_arr)
        return _like(at, (g_plus - g_minus) / (2.0 * h))
    raise ContractViolation(f"unknown hvp method {method!r}")


def grad_and_hvp(graph: CompGraph, at, make_direction):
    """One shared forward pass returning (grad, hvp(make_direction(grad))).

    `make_direction` maps the gradient value to the HVP direction (e.g. its
    guarded normalization). The forward graph and first backward sweep are
    reused, so this costs one forward plus two backward sweeps.
    """
    arr = graph._coerce(at)
    leaf, out = graph._run(arr)
    (g,) = backward(out, [leaf])
    g_val = np.array(g.value, dtype=np.float64)
    direction = np.asarray(make_direction(g_val), dtype=np.float64)
    s = dot(g, const(direction))
    (h,) = backward(s, [leaf])
    return _like(at, g_val), _like(at, np.array(h.value, dtype=np.float64))


def fd_gradient_oracle(loss_fn, at, step: float):
    """Per-coordinate central-difference gradient estimate (test oracle).

    `loss_fn` maps a 1-D numpy vector to a float. Independent of the
    reverse-mode path so the two can cross-check each other.
    """
    if step <= 0:
        raise ContractViolation("fd step must be positive")
    arr = at.data.copy() if isinstance(at, ParamVector) else np.asarray(at, dtype=np.float64).ravel().copy()
    grad = np.zeros_like(arr)
    for i in range(arr.size):
        orig = arr[i]
        arr[i] = orig + step
        f_plus = float(loss_fn(arr))
        arr[i] = orig - step
        f_minus = float(loss_fn(arr))
        arr[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return _like(at, grad)
