"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine differentiates through its own gradients: ``gradient(...,
build_graph=True)`` returns expressions that are themselves part of the
graph, so a scalar assembled from them can be differentiated again (double
backprop). That is what makes a gradient-difference penalty trainable: the
penalty contains input-gradients, and the optimizer needs the derivative of
the penalty with respect to the weights.

Conventions that the rest of the package relies on:

* everything is float64, row-major;
* ``sgn(0) = 0`` and the sign op has zero derivative everywhere;
* a graph is confined to one thread; tensors are plain immutable values.
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels

Tensor = np.ndarray

# Differentiability depth of constants: never the limiting factor.
_CONST_DEPTH = 1 << 30
MAX_DEPTH = 2


class AutodiffError(ValueError):
    """Raised for graph misuse: shape mismatch, depth overrun, bad wrt."""


def tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Coerce ``data`` to a C-contiguous float64 array, checking finiteness.

    Non-finite input surfaces as an error instead of propagating silently.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise AutodiffError("tensor contains non-finite values")
    return arr


class ParameterSet:
    """Ordered, uniquely named collection of weight tensors.

    Iteration order is insertion order and survives save/load round trips,
    which is what makes checkpoints and optimizer state line up.
    """

    def __init__(self, items: Sequence[tuple[str, Tensor]] = ()):
        self._data: dict[str, Tensor] = {}
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._data:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        self._data[name] = tensor(value)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._data[name]

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self):
        return iter(self._data.items())

    def replace(self, updates: dict[str, Tensor]) -> "ParameterSet":
        """New ParameterSet with some values swapped; order is preserved."""
        unknown = set(updates) - set(self._data)
        if unknown:
            raise AutodiffError(f"unknown parameter names {sorted(unknown)}")
        return ParameterSet(
            [(n, updates.get(n, v)) for n, v in self._data.items()]
        )

    def count(self) -> int:
        return sum(v.size for v in self._data.values())

    def allclose(self, other: "ParameterSet", **kw) -> bool:
        return self.names() == other.names() and all(
            np.allclose(self[n], other[n], **kw) for n in self.names()
        )


class PassCounter:
    """Instrumented count of backward passes, for efficiency accounting.

    ``first_order`` counts gradient passes over plain forward graphs;
    ``second_order`` counts backward passes over graphs that already contain
    gradient nodes (i.e. double backprop).
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.first_order = 0
        self.second_order = 0

    def reset(self) -> None:
        with self._lock:
            self.first_order = 0
            self.second_order = 0

    def _bump(self, second_order: bool) -> None:
        with self._lock:
            if second_order:
                self.second_order += 1
            else:
                self.first_order += 1

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.first_order, self.second_order


passes = PassCounter()

# Whether expressions built right now record their parents. Gradient
# construction flips this off unless build_graph is requested, so throwaway
# adjoints don't retain the forward graph.
_mode = threading.local()

_CHECK_EVERY_OP = os.environ.get("CVTR_CHECK_FINITE", "") == "1"


def _recording() -> bool:
    return getattr(_mode, "recording", True)


def _depth_override() -> int | None:
    return getattr(_mode, "depth_override", None)


def _mark_grad() -> bool:
    return getattr(_mode, "mark_grad", False)


class Expr:
    """One node of the expression graph.

    ``depth`` is the number of gradient constructions this node still
    supports; it is declared at leaf creation and capped at 2.
    """

    __slots__ = ("tag", "value", "parents", "depth", "ctx", "contains_grad")

    def __init__(self, tag: str, value: Tensor, parents: tuple["Expr", ...],
                 depth: int, ctx=None):
        self.tag = tag
        self.value = value
        self.parents = parents
        self.depth = depth
        self.ctx = ctx
        self.contains_grad = any(p.contains_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Expr({self.tag}, shape={self.value.shape}, depth={self.depth})"


def _node(tag: str, value: np.ndarray, parents: tuple[Expr, ...], ctx=None) -> Expr:
    if _CHECK_EVERY_OP and not np.all(np.isfinite(value)):
        raise AutodiffError(f"non-finite values produced by op {tag!r}")
    if not _recording():
        n = Expr(tag, value, (), 0, None)
        n.contains_grad = _mark_grad()
        return n
    override = _depth_override()
    if override is not None:
        depth = override
    else:
        depth = min((p.depth for p in parents), default=_CONST_DEPTH)
    n = Expr(tag, value, parents, depth, ctx)
    if _mark_grad():
        n.contains_grad = True
    return n


def leaf(data, depth: int = 1) -> Expr:
    """Differentiable leaf (an input or a parameter)."""
    if not 0 <= depth <= MAX_DEPTH:
        raise AutodiffError(
            f"unsupported differentiability depth {depth} (max {MAX_DEPTH})")
    return Expr("leaf", tensor(data), (), depth)


def constant(data) -> Expr:
    """Leaf that never receives a gradient (labels, masks, step sizes)."""
    arr = np.asarray(data, dtype=np.float64)
    return Expr("const", arr, (), _CONST_DEPTH)


# ---------------------------------------------------------------------------
# primitive ops
#
# Each op computes its value eagerly with numpy and registers a VJP that is
# itself written in terms of these ops, which is what closes the set under
# repeated differentiation.
# ---------------------------------------------------------------------------

_VJPS: dict[str, Callable] = {}


def _vjp(tag: str):
    def deco(fn):
        _VJPS[tag] = fn
        return fn
    return deco


def _reduce_to(g: Expr, shape: tuple[int, ...]) -> Expr:
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.value.shape == shape:
        return g
    return sum_to(g, shape)


def add(a: Expr, b: Expr) -> Expr:
    return _node("add", a.value + b.value, (a, b))


@_vjp("add")
def _(node, g, need):
    a, b = node.parents
    return (
        _reduce_to(g, a.value.shape) if need[0] else None,
        _reduce_to(g, b.value.shape) if need[1] else None,
    )


def sub(a: Expr, b: Expr) -> Expr:
    return _node("sub", a.value - b.value, (a, b))


@_vjp("sub")
def _(node, g, need):
    a, b = node.parents
    return (
        _reduce_to(g, a.value.shape) if need[0] else None,
        _reduce_to(neg(g), b.value.shape) if need[1] else None,
    )


def mul(a: Expr, b: Expr) -> Expr:
    return _node("mul", a.value * b.value, (a, b))


@_vjp("mul")
def _(node, g, need):
    a, b = node.parents
    return (
        _reduce_to(mul(g, b), a.value.shape) if need[0] else None,
        _reduce_to(mul(g, a), b.value.shape) if need[1] else None,
    )


def div(a: Expr, b: Expr) -> Expr:
    return _node("div", a.value / b.value, (a, b))


@_vjp("div")
def _(node, g, need):
    a, b = node.parents
    ga = gb = None
    if need[0]:
        ga = _reduce_to(div(g, b), a.value.shape)
    if need[1]:
        gb = _reduce_to(neg(div(mul(g, node), b)), b.value.shape)
    return ga, gb


def neg(a: Expr) -> Expr:
    return _node("neg", -a.value, (a,))


@_vjp("neg")
def _(node, g, need):
    return (neg(g),)


def scale(a: Expr, c: float) -> Expr:
    """Multiply by a python scalar constant."""
    return mul(a, constant(np.float64(c)))


def matmul(a: Expr, b: Expr) -> Expr:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise AutodiffError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise AutodiffError(
            f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    return _node("matmul", a.value @ b.value, (a, b))


@_vjp("matmul")
def _(node, g, need):
    a, b = node.parents
    return (
        matmul(g, mT(b)) if need[0] else None,
        matmul(mT(a), g) if need[1] else None,
    )


def mT(a: Expr) -> Expr:
    """2-D matrix transpose."""
    return _node("mT", np.ascontiguousarray(a.value.T), (a,))


@_vjp("mT")
def _(node, g, need):
    return (mT(g),)


def transpose(a: Expr, axes: tuple[int, ...]) -> Expr:
    return _node("transpose",
                 np.ascontiguousarray(a.value.transpose(axes)), (a,),
                 ctx=axes)


@_vjp("transpose")
def _(node, g, need):
    axes = node.ctx
    inv = tuple(np.argsort(axes))
    return (transpose(g, inv),)


def reshape(a: Expr, shape: Sequence[int]) -> Expr:
    return _node("reshape", a.value.reshape(shape), (a,),
                 ctx=a.value.shape)


@_vjp("reshape")
def _(node, g, need):
    return (reshape(g, node.ctx),)


def broadcast_to(a: Expr, shape: Sequence[int]) -> Expr:
    return _node("bcast", np.broadcast_to(a.value, shape), (a,),
                 ctx=a.value.shape)


@_vjp("bcast")
def _(node, g, need):
    return (_reduce_to(g, node.ctx),)


def _sum_to_value(v: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if v.shape == shape:
        return v.copy()
    lead = v.ndim - len(shape)
    if lead < 0:
        raise AutodiffError(f"cannot reduce {v.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and v.shape[lead + i] != 1
    )
    out = v.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(a: Expr, shape: Sequence[int]) -> Expr:
    """Sum over broadcast axes so the result has ``shape``."""
    shape = tuple(shape)
    return _node("sum_to", _sum_to_value(a.value, shape), (a,),
                 ctx=a.value.shape)


@_vjp("sum_to")
def _(node, g, need):
    return (broadcast_to(g, node.ctx),)


def sum_all(a: Expr) -> Expr:
    return _node("sum_all", np.asarray(a.value.sum()), (a,),
                 ctx=a.value.shape)


@_vjp("sum_all")
def _(node, g, need):
    return (broadcast_to(g, node.ctx),)


def exp(a: Expr) -> Expr:
    return _node("exp", np.exp(a.value), (a,))


@_vjp("exp")
def _(node, g, need):
    return (mul(g, node),)


def sqrt(a: Expr) -> Expr:
    """Elementwise square root with subgradient 0 at exactly 0.

    The zero guard keeps gradient-difference norms of locally linear losses
    from producing NaN; away from 0 the derivative is exact.
    """
    return _node("sqrt", np.sqrt(a.value), (a,))


@_vjp("sqrt")
def _(node, g, need):
    zero = node.value == 0.0
    if zero.any():
        den = add(node, constant(zero.astype(np.float64)))
    else:
        den = node
    return (div(scale(g, 0.5), den),)


def tanh(a: Expr) -> Expr:
    return _node("tanh", np.tanh(a.value), (a,))


@_vjp("tanh")
def _(node, g, need):
    return (mul(g, sub(constant(1.0), mul(node, node))),)


def sign(a: Expr) -> Expr:
    """sgn with sgn(0) = 0; derivative defined as 0 everywhere."""
    return _node("sign", np.sign(a.value), (a,))


@_vjp("sign")
def _(node, g, need):
    return (constant(np.zeros(node.parents[0].value.shape)),)


def relu(a: Expr) -> Expr:
    """max(x, 0); the gradient treats the activity mask as constant."""
    return _node("relu", np.maximum(a.value, 0.0), (a,),
                 ctx=a.value > 0)


@_vjp("relu")
def _(node, g, need):
    # the boolean mask multiplies without a float64 materialization
    return (mul(g, Expr("const", node.ctx, (), _CONST_DEPTH)),)


def log_softmax(a: Expr) -> Expr:
    """Row-wise log softmax of a [batch, classes] matrix."""
    z = a.value
    m = z.max(axis=1, keepdims=True)
    s = z - m
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    return _node("log_softmax", s - lse, (a,))


@_vjp("log_softmax")
def _(node, g, need):
    soft = exp(node)
    row = sum_to(g, (g.value.shape[0], 1))
    return (sub(g, mul(soft, broadcast_to(row, g.value.shape))),)


# --- convolution ----------------------------------------------------------
#
# NHWC layout, weights [KH, KW, Cin, Cout]. The three node kinds (forward,
# gradient w.r.t. input, gradient w.r.t. weights) are each bilinear, and
# their VJPs are expressible in terms of one another, so convolutions stay
# differentiable to second order. Value computation lives in _kernels.

class _ConvGeom:
    __slots__ = ("kh", "kw", "stride", "pad", "xshape")

    def __init__(self, kh, kw, stride, pad, xshape):
        self.kh, self.kw, self.stride, self.pad = kh, kw, stride, pad
        self.xshape = xshape

    def out_hw(self):
        _, h, w, _ = self.xshape
        return _kernels.out_hw(h, w, self.kh, self.kw, self.stride, self.pad)


def conv2d(x: Expr, w: Expr, stride: int = 1, pad: int = 0) -> Expr:
    """2-D convolution (cross-correlation), NHWC x [KH,KW,Cin,Cout] w."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise AutodiffError("conv2d expects 4-D input and weights")
    if x.value.shape[3] != w.value.shape[2]:
        raise AutodiffError(
            f"conv2d channel mismatch: input {x.value.shape}, w {w.value.shape}")
    kh, kw = w.value.shape[:2]
    geom = _ConvGeom(kh, kw, stride, pad, x.value.shape)
    oh, ow = geom.out_hw()
    if oh <= 0 or ow <= 0:
        raise AutodiffError("conv2d output would be empty")
    return _node("conv2d", _kernels.conv_fwd(x.value, w.value, stride, pad),
                 (x, w), ctx=geom)


@_vjp("conv2d")
def _(node, g, need):
    x, w = node.parents
    geom = node.ctx
    gx = conv2d_input_grad(g, w, geom) if need[0] else None
    gw = conv2d_weight_grad(x, g, geom) if need[1] else None
    return gx, gw


def conv2d_input_grad(g: Expr, w: Expr, geom: _ConvGeom) -> Expr:
    value = _kernels.conv_xgrad(g.value, w.value, geom.stride, geom.pad,
                                geom.xshape)
    return _node("conv2d_xgrad", value, (g, w), ctx=geom)


@_vjp("conv2d_xgrad")
def _(node, g2, need):
    gparent, w = node.parents
    geom = node.ctx
    a = conv2d(g2, w, geom.stride, geom.pad) if need[0] else None
    b = conv2d_weight_grad(g2, gparent, geom) if need[1] else None
    return a, b


def conv2d_weight_grad(x: Expr, g: Expr, geom: _ConvGeom) -> Expr:
    value = _kernels.conv_wgrad(x.value, g.value, geom.stride, geom.pad,
                                geom.kh, geom.kw)
    return _node("conv2d_wgrad", value, (x, g), ctx=geom)


@_vjp("conv2d_wgrad")
def _(node, gw, need):
    x, g = node.parents
    geom = node.ctx
    a = conv2d_input_grad(g, gw, geom) if need[0] else None
    b = conv2d(x, gw, geom.stride, geom.pad) if need[1] else None
    return a, b


# --- max pooling -----------------------------------------------------------
#
# The window winner masks are constants of the backward pass (the usual
# piecewise-linear treatment); scatter and masked gather form a dual pair of
# linear primitives, closing the pooling path under double backprop.

def _pool_quadrants(v: np.ndarray):
    return (v[:, 0::2, 0::2, :], v[:, 0::2, 1::2, :],
            v[:, 1::2, 0::2, :], v[:, 1::2, 1::2, :])


def max_pool2(a: Expr) -> Expr:
    """2x2/stride-2 max pooling (NHWC); ties resolve to the first element
    in window scan order, so gradients are deterministic on plateaus."""
    b, h, w, c = a.value.shape
    if h % 2 or w % 2:
        raise AutodiffError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    q00, q01, q10, q11 = _pool_quadrants(a.value)
    m = np.maximum(np.maximum(q00, q01), np.maximum(q10, q11))
    w00 = q00 == m
    w01 = (q01 == m) & ~w00
    w10 = (q10 == m) & ~(w00 | w01)
    w11 = (q11 == m) & ~(w00 | w01 | w10)
    return _node("max_pool2", m, (a,), ctx=(w00, w01, w10, w11))


@_vjp("max_pool2")
def _(node, g, need):
    return (_unpool2(g, node.ctx),)


def _unpool2(g: Expr, masks) -> Expr:
    b, h2, w2, c = g.value.shape
    out = np.empty((b, 2 * h2, 2 * w2, c))  # quadrants cover every cell
    quads = _pool_quadrants(out)
    for q, m in zip(quads, masks):
        np.multiply(g.value, m, out=q)
    return _node("unpool2", out, (g,), ctx=masks)


@_vjp("unpool2")
def _(node, g2, need):
    return (_pool_gather(g2, node.ctx),)


def _pool_gather(v: Expr, masks) -> Expr:
    quads = _pool_quadrants(v.value)
    acc = quads[0] * masks[0]
    for q, m in zip(quads[1:], masks[1:]):
        acc += q * m
    return _node("pool_gather", acc, (v,), ctx=masks)


@_vjp("pool_gather")
def _(node, g, need):
    return (_unpool2(g, node.ctx),)


def softmax_cross_entropy(logits: Expr, labels: Sequence[int]) -> Expr:
    """Mean cross-entropy of [batch, classes] logits against integer labels."""
    b, k = logits.value.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise AutodiffError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= k:
        raise AutodiffError("label out of range")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    lp = log_softmax(logits)
    picked = sum_all(mul(lp, constant(onehot)))
    return scale(picked, -1.0 / b)


def l2_norm(a: Expr) -> Expr:
    """Euclidean norm of the whole tensor, as a scalar expression."""
    return sqrt(sum_all(mul(a, a)))


def row_l2_norms(a: Expr) -> Expr:
    """Per-row Euclidean norms of a [batch, d] matrix -> [batch, 1]."""
    return sqrt(sum_to(mul(a, a), (a.value.shape[0], 1)))


# ---------------------------------------------------------------------------
# gradient construction
# ---------------------------------------------------------------------------

def _toposort(root: Expr) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradient(output: Expr, wrt: Sequence[Expr], build_graph: bool = False
             ) -> list[Expr]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each of ``wrt``.

    With ``build_graph`` the returned expressions are differentiable one
    more level (their depth is the graph's remaining depth minus one);
    without it they are plain detached values.

    Raises AutodiffError for a non-scalar output, an unreachable wrt entry,
    or a graph whose declared differentiability depth is exhausted.
    """
    if output.value.size != 1:
        raise AutodiffError(
            f"gradient needs a scalar output, got shape {output.value.shape}")
    if output.depth < 1:
        raise AutodiffError(
            "graph does not support further gradient construction "
            "(declared differentiability depth exhausted)")

    order = _toposort(output)
    wrt_ids = {id(w) for w in wrt}
    if len(wrt_ids) != len(wrt):
        raise AutodiffError("duplicate wrt entries")

    # Upward pass: which nodes lie on a path from output down to some wrt.
    needed: set[int] = set()
    for node in order:  # leaves first
        if id(node) in wrt_ids or any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    missing = [i for i, w in enumerate(wrt) if id(w) not in needed]
    if id(output) not in needed:
        missing = list(range(len(wrt)))
    if missing:
        raise AutodiffError(
            f"wrt entries {missing} are not reachable from the output")

    passes._bump(second_order=output.contains_grad)

    prev_rec = getattr(_mode, "recording", True)
    prev_mark = getattr(_mode, "mark_grad", False)
    prev_depth = getattr(_mode, "depth_override", None)
    _mode.recording = build_graph
    _mode.mark_grad = build_graph
    _mode.depth_override = (output.depth - 1) if build_graph else 0
    try:
        adjoint: dict[int, Expr] = {
            id(output): constant(np.ones(output.value.shape))
        }
        for node in reversed(order):
            if id(node) not in needed or id(node) not in adjoint:
                continue
            if not node.parents:
                continue
            g = adjoint[id(node)]
            need = [id(p) in needed for p in node.parents]
            contribs = _VJPS[node.tag](node, g, need)
            for p, c in zip(node.parents, contribs):
                if c is None:
                    continue
                prev = adjoint.get(id(p))
                adjoint[id(p)] = c if prev is None else add(prev, c)

        results = []
        for w in wrt:
            got = adjoint.get(id(w))
            if got is None:
                got = constant(np.zeros(w.value.shape))
            if got.value.shape != w.value.shape:
                raise AutodiffError("internal: adjoint shape mismatch")
            results.append(got)
    finally:
        _mode.recording = prev_rec
        _mode.mark_grad = prev_mark
        _mode.depth_override = prev_depth

    for r in results:
        if not np.all(np.isfinite(r.value)):
            raise AutodiffError("non-finite gradient")
    return results


def grad_values(output: Expr, wrt: Sequence[Expr]) -> list[Tensor]:
    """Convenience: detached gradient arrays."""
    return [g.value for g in gradient(output, wrt, build_graph=False)]


def finite_difference_gradient(f: Callable[[Tensor], float], at: Tensor,
                               step: float = 1e-5) -> Tensor:
    """Central-difference gradient oracle, one coordinate at a time.

    Deliberately independent of the graph machinery so it can vouch for it.
    """
    if step <= 0:
        raise AutodiffError("step must be positive")
    base = tensor(at).copy()
    flat = base.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(base))
        flat[i] = orig - step
        lo = float(f(base))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise AutodiffError("non-finite function evaluation in oracle")
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(at.shape)
