"""Reverse-mode automatic differentiation over dense numpy arrays.

Primitive applications are recorded on explicit tapes.  ``grad`` walks a
tape's node list in reverse recording order, which fixes the gradient
accumulation order: replaying a reverse pass is bit-identical.  When called
with ``create_graph=True`` the reverse pass itself runs through the same
primitive layer, so the backward computation lands on the still-active tape
and can be differentiated again (the second-order path needed when
backpropagating through inner-loop adaptation).

Float64 is the default precision; float32 is available as a runtime option.
Tapes are single-threaded; the recording stack is thread-local so independent
tapes may run on separate threads.  Recorded values are treated as immutable.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, NumericFault

MAX_TAPE_NESTING = 8

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


class _ThreadState(threading.local):
    def __init__(self):
        self.tapes = []
        self.no_record = 0


_STATE = _ThreadState()


class Tensor:
    """Dense row-major array with an optional place in a recorded graph."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """A leaf view of the same values, cut out of any recorded graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; every route goes through the recorded primitives
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


class Node:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op, inputs, out, ctx):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tape:
    """Ordered record of primitive applications.

    Entering a tape pushes it on the thread-local stack; nodes are appended
    to every active tape so outer tapes see work done under inner ones.
    """

    __slots__ = ("nodes", "level")

    def __init__(self):
        self.nodes = []
        self.level = None

    def __enter__(self):
        if len(_STATE.tapes) >= MAX_TAPE_NESTING:
            raise ConfigError(
                f"tape nesting depth exceeded (max {MAX_TAPE_NESTING})"
            )
        self.level = len(_STATE.tapes)
        _STATE.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STATE.tapes.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def position(self):
        """Current node count; usable as a ``start`` marker for grad()."""
        return len(self.nodes)


class no_record:
    """Context that suspends recording (and requires_grad propagation)."""

    def __enter__(self):
        _STATE.no_record += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.no_record -= 1
        return False


def recording_active():
    return bool(_STATE.tapes) and _STATE.no_record == 0


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _apply(op, out_data, inputs, ctx=None):
    if not np.isfinite(out_data).all():
        raise NumericFault(f"non-finite output of primitive '{op}'", op=op)
    rec = (
        _STATE.no_record == 0
        and _STATE.tapes
        and any(t.requires_grad for t in inputs)
    )
    out = Tensor(out_data, requires_grad=bool(rec))
    if rec:
        node = Node(op, inputs, out, ctx)
        for tape in _STATE.tapes:
            tape.nodes.append(node)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _apply("add", a.data + b.data, (a, b))


def sub(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _apply("sub", a.data - b.data, (a, b))


def mul(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    return _apply("mul", a.data * b.data, (a, b))


def div(a, b):
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _apply("div", out, (a, b))


def neg(x):
    return _apply("neg", -x.data, (x,))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _apply("matmul", a.data @ b.data, (a, b))


def transpose(x):
    if x.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {x.shape}")
    return _apply("transpose", np.ascontiguousarray(x.data.T), (x,))


def reshape(x, shape):
    return _apply("reshape", x.data.reshape(shape), (x,), ctx=x.shape)


def broadcast_to(x, shape):
    return _apply("broadcast_to", np.broadcast_to(x.data, shape).copy(), (x,), ctx=x.shape)


def tsum(x, axis=None, keepdims=False):
    return _apply(
        "sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), ctx=(axis, keepdims)
    )


def sin(x):
    return _apply("sin", np.sin(x.data), (x,))


def cos(x):
    return _apply("cos", np.cos(x.data), (x,))


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _apply("exp", out, (x,))


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _apply("log", out, (x,))


def sqrt(x):
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _apply("sqrt", out, (x,))


def sigmoid(x):
    out = np.empty_like(x.data)
    np.negative(np.abs(x.data), out=out)
    np.exp(out, out=out)
    # stable logistic: e^{-|x|}/(1+e^{-|x|}) on the negative side
    pos = x.data >= 0
    out = np.where(pos, 1.0 / (1.0 + out), out / (1.0 + out))
    return _apply("sigmoid", out, (x,))


def tanh(x):
    return _apply("tanh", np.tanh(x.data), (x,))


def softplus(x):
    return _apply("softplus", np.logaddexp(0.0, x.data), (x,))


def selu(x):
    pos = x.data > 0.0
    out = np.where(
        pos,
        SELU_LAMBDA * x.data,
        SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x.data, 0.0)),
    )
    return _apply("selu", out, (x,), ctx=pos)


def leaky_relu(x, slope=0.01):
    pos = x.data > 0.0
    out = np.where(pos, x.data, slope * x.data)
    return _apply("leaky_relu", out, (x,), ctx=(pos, slope))


def clip_min(x, floor):
    above = x.data > floor
    return _apply("clip_min", np.maximum(x.data, floor), (x,), ctx=above)


def narrow(x, start, length):
    """Contiguous 1-D slice x[start:start+length]."""
    if x.ndim != 1:
        raise ValueError(f"narrow expects a 1-D tensor, got shape {x.shape}")
    if start < 0 or start + length > x.shape[0]:
        raise ValueError(
            f"narrow window [{start}, {start + length}) outside length {x.shape[0]}"
        )
    return _apply("narrow", x.data[start : start + length].copy(), (x,), ctx=(start, x.shape[0]))


def _embed(x, start, total):
    out = np.zeros(total, dtype=x.dtype)
    out[start : start + x.shape[0]] = x.data
    return _apply("embed", out, (x,), ctx=(start, x.shape[0]))


def einsum(spec, a, b):
    """Two-operand einsum restricted to contraction-style equations.

    Each operand's index set must be covered by the other operand plus the
    output, which is exactly the condition for the adjoint to be another
    einsum of the same family.
    """
    lhs, out_spec = spec.split("->")
    sa, sb = lhs.split(",")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ValueError(f"einsum '{spec}': repeated index within one operand")
    if not (set(sa) <= set(sb) | set(out_spec) and set(sb) <= set(sa) | set(out_spec)):
        raise ValueError(f"einsum '{spec}': operand index not recoverable in adjoint")
    return _apply("einsum", np.einsum(spec, a.data, b.data), (a, b), ctx=(sa, sb, out_spec))


# ---------------------------------------------------------------------------
# reverse rules (each expressed through the primitives above, so the reverse
# pass can itself be recorded)


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def _vjp_add(node, g, needs):
    a, b = node.inputs
    return (
        _reduce_to(g, a.shape) if needs[0] else None,
        _reduce_to(g, b.shape) if needs[1] else None,
    )


def _vjp_sub(node, g, needs):
    a, b = node.inputs
    return (
        _reduce_to(g, a.shape) if needs[0] else None,
        _reduce_to(neg(g), b.shape) if needs[1] else None,
    )


def _vjp_mul(node, g, needs):
    a, b = node.inputs
    return (
        _reduce_to(mul(g, b), a.shape) if needs[0] else None,
        _reduce_to(mul(g, a), b.shape) if needs[1] else None,
    )


def _vjp_div(node, g, needs):
    a, b = node.inputs
    ga = _reduce_to(div(g, b), a.shape) if needs[0] else None
    gb = _reduce_to(neg(div(mul(g, node.out), b)), b.shape) if needs[1] else None
    return (ga, gb)


def _vjp_neg(node, g, needs):
    return (neg(g),)


def _vjp_matmul(node, g, needs):
    a, b = node.inputs
    return (
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    )


def _vjp_transpose(node, g, needs):
    return (transpose(g),)


def _vjp_reshape(node, g, needs):
    return (reshape(g, node.ctx),)


def _vjp_broadcast_to(node, g, needs):
    return (_reduce_to(g, node.ctx),)


def _vjp_sum(node, g, needs):
    axis, keepdims = node.ctx
    (x,) = node.inputs
    if axis is None or keepdims:
        expanded = g
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        kept = list(g.shape)
        for ax in sorted(a % x.ndim for a in axes):
            kept.insert(ax, 1)
        expanded = reshape(g, tuple(kept))
    return (broadcast_to(expanded, x.shape),)


def _vjp_sin(node, g, needs):
    return (mul(g, cos(node.inputs[0])),)


def _vjp_cos(node, g, needs):
    return (neg(mul(g, sin(node.inputs[0]))),)


def _vjp_exp(node, g, needs):
    return (mul(g, node.out),)


def _vjp_log(node, g, needs):
    return (div(g, node.inputs[0]),)


def _vjp_sqrt(node, g, needs):
    return (div(mul(g, 0.5), node.out),)


def _vjp_sigmoid(node, g, needs):
    y = node.out
    return (mul(g, mul(y, sub(1.0, y))),)


def _vjp_tanh(node, g, needs):
    y = node.out
    return (mul(g, sub(1.0, mul(y, y))),)


def _vjp_softplus(node, g, needs):
    return (mul(g, sigmoid(node.inputs[0])),)


def _vjp_selu(node, g, needs):
    pos = node.ctx
    # slope is lam for x > 0 and lam*alpha*e^x = y + lam*alpha otherwise
    neg_slope = add(node.out, SELU_LAMBDA * SELU_ALPHA)
    mask = Tensor(pos.astype(node.out.dtype))
    inv = Tensor((~pos).astype(node.out.dtype))
    return (mul(g, add(mul(mask, SELU_LAMBDA), mul(inv, neg_slope))),)


def _vjp_leaky_relu(node, g, needs):
    pos, slope = node.ctx
    factor = np.where(pos, 1.0, slope).astype(node.out.dtype)
    return (mul(g, Tensor(factor)),)


def _vjp_clip_min(node, g, needs):
    above = node.ctx
    return (mul(g, Tensor(above.astype(node.out.dtype))),)


def _vjp_narrow(node, g, needs):
    start, total = node.ctx
    return (_embed(g, start, total),)


def _vjp_embed(node, g, needs):
    start, length = node.ctx
    return (narrow(g, start, length),)


def _vjp_einsum(node, g, needs):
    sa, sb, so = node.ctx
    a, b = node.inputs
    ga = einsum(f"{so},{sb}->{sa}", g, b) if needs[0] else None
    gb = einsum(f"{so},{sa}->{sb}", g, a) if needs[1] else None
    return (ga, gb)


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "broadcast_to": _vjp_broadcast_to,
    "sum": _vjp_sum,
    "sin": _vjp_sin,
    "cos": _vjp_cos,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sqrt": _vjp_sqrt,
    "sigmoid": _vjp_sigmoid,
    "tanh": _vjp_tanh,
    "softplus": _vjp_softplus,
    "selu": _vjp_selu,
    "leaky_relu": _vjp_leaky_relu,
    "clip_min": _vjp_clip_min,
    "narrow": _vjp_narrow,
    "embed": _vjp_embed,
    "einsum": _vjp_einsum,
}


# ---------------------------------------------------------------------------
# composites


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def mse(pred, target):
    d = sub(pred, target)
    return mean(mul(d, d))


def layer_norm(x, eps=1e-5):
    """Normalize over the last axis to zero mean, unit variance (biased)."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


def dot(a, b):
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# reverse pass


def grad(output, wrt, tape=None, create_graph=False, start=0, through=None):
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Walks ``tape`` (default: innermost active) in reverse recording order from
    node index ``start``; accumulation order is fixed, so repeated calls are
    bit-identical.  With ``create_graph=True`` the reverse pass is recorded on
    the active tapes and is itself differentiable.  Parameters the output does
    not depend on receive zero gradients.

    ``through``, when given, restricts the reverse pass to paths flowing out
    of those source tensors (``wrt`` must be a subset); everything else is
    pruned by a forward reachability scan.
    """
    if output.data.shape != ():
        raise ValueError(f"grad expects a scalar output, got shape {output.shape}")
    if tape is None:
        if not _STATE.tapes:
            raise ValueError("grad called with no active tape")
        tape = _STATE.tapes[-1]
    wrt = list(wrt)
    wrt_ids = {id(p) for p in wrt}
    captured = {}

    nodes = tape.nodes[start:]
    reach = None
    if through is not None:
        reach = {id(t) for t in through}
        if not wrt_ids <= reach:
            raise ValueError("wrt must be a subset of 'through' sources")
        for node in nodes:
            if any(id(t) in reach for t in node.inputs):
                reach.add(id(node.out))

    adjoint = {id(output): Tensor(np.ones((), dtype=output.dtype))}
    guard = no_record() if not create_graph else _NullCtx()
    with guard:
        for node in reversed(nodes):
            g = adjoint.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wrt_ids:
                captured[id(node.out)] = g
            if reach is None:
                needs = tuple(t.requires_grad for t in node.inputs)
            else:
                needs = tuple(
                    t.requires_grad and id(t) in reach for t in node.inputs
                )
            if not any(needs):
                continue
            grads = _VJPS[node.op](node, g, needs)
            for inp, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = gi if prev is None else add(prev, gi)

        results = []
        for p in wrt:
            got = captured.get(id(p))
            if got is None:
                got = adjoint.get(id(p))
            if got is None:
                got = Tensor(np.zeros(p.shape, dtype=p.dtype))
            results.append(got)
    return results


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
