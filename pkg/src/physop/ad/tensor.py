"""Tape-based reverse-mode tensors on top of numpy float64 arrays.

Every primitive computes its value eagerly. When a :class:`Tape` is active and
at least one input is tracked, the primitive appends a node to the tape that
holds its inputs and a VJP closure. VJP closures are themselves written in
terms of primitives, so running a backward sweep while recording
(``create_graph=True``) yields a differentiable graph of the gradient.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NotScalar(ValueError):
    pass


class Unsupported(ValueError):
    pass


class Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op, inputs, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp

    def input_ids(self, tape):
        """Node ids of the inputs (``None`` for leaves and constants)."""
        return tuple(t._nid if t._tape is tape else None for t in self.inputs)


class Tape:
    """Ordered record of primitive applications.

    Node ``i`` only ever consumes tensors created by nodes ``< i`` or leaves,
    so walking the list backwards is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)


_STACK: list = []


class no_grad:
    """Suspend recording on the active tape."""

    def __enter__(self):
        _STACK.append(None)

    def __exit__(self, *exc):
        _STACK.pop()
        return False


class _resume:
    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        _STACK.append(self.tape)

    def __exit__(self, *exc):
        _STACK.pop()
        return False


def current_tape():
    return _STACK[-1] if _STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_nid")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape = None
        self._nid = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", node={self._nid}" if self._nid is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar routes through the generic dispatcher so that mixing
    # with forward-mode duals works from either side
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, o):
        return _ops().pow(self, o)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __rmatmul__(self, o):
        return _ops().matmul(o, self)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    @property
    def T(self):
        return _ops().transpose(self)


def _ops():
    from physop.ad import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape) -> bool:
    return t._tape is tape or (t._tape is None and t.requires_grad)


def _record(op: str, data, inputs, vjp) -> Tensor:
    tape = current_tape()
    out = Tensor(data)
    if tape is not None:
        for t in inputs:
            if _tracked(t, tape):
                out.requires_grad = True
                out._tape = tape
                out._nid = len(tape.nodes)
                tape.nodes.append(Node(op, tuple(inputs), vjp))
                break
    return out


# --------------------------------------------------------------------------
# helpers


def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    axes = tuple(range(nlead)) + tuple(
        nlead + i for i, s in enumerate(shape) if s == 1 and g.shape[nlead + i] != 1
    )
    if axes:
        g = tsum(g, axis=axes, keepdims=False)
    return reshape(g, shape) if g.shape != tuple(shape) else g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(neg(g), sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def vjp(g):
        ga = div(g, b)
        gb = neg(mul(ga, div(a, b)))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("div", a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (neg(g),))


def pow(a, c: float) -> Tensor:
    """``a ** c`` for a constant real exponent."""
    a = as_tensor(a)
    c = float(c)
    if c == 2.0:
        data = a.data * a.data
    else:
        data = np.power(a.data, c)

    def vjp(g):
        if c == 1.0:
            return (g,)
        if c == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(pow(a, c - 1.0), c)),)

    return _record("pow", data, (a,), vjp)


# --------------------------------------------------------------------------
# elementwise unary


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _record("sin", np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _record("cos", np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_box = []

    def vjp(g):
        return (mul(g, out_box[0]),)

    out = _record("exp", np.exp(a.data), (a,), vjp)
    out_box.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_box = []

    def vjp(g):
        y = out_box[0]
        return (mul(g, sub(1.0, mul(y, y))),)

    out = _record("tanh", np.tanh(a.data), (a,), vjp)
    out_box.append(out)
    return out


def mod1(a) -> Tensor:
    """``a - floor(a)``: wraps into [0, 1) with unit derivative."""
    a = as_tensor(a)
    return _record("mod1", a.data - np.floor(a.data), (a,), lambda g: (g,))


def round_to(a, dtype) -> Tensor:
    """Round values to a lower-precision format; straight-through VJP."""
    a = as_tensor(a)
    return _record("round", quantize(a.data, dtype), (a,), lambda g: (g,))


def quantize(x: np.ndarray, dtype) -> np.ndarray:
    """Round float64 values to ``dtype`` (round-to-nearest-even) and widen back."""
    if dtype in (None, "f64", np.float64):
        return x
    if dtype in ("f32", np.float32):
        return x.astype(np.float32).astype(np.float64)
    if dtype in ("f16", np.float16):
        with np.errstate(over="ignore"):
            return x.astype(np.float16).astype(np.float64)
    if dtype == "bf16":
        bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
        rounding = ((bits >> 16) & 1) + np.uint32(0x7FFF)
        bits = ((bits + rounding) & np.uint32(0xFFFF0000)).astype(np.uint32)
        return bits.view(np.float32).astype(np.float64)
    raise Unsupported(f"unknown precision {dtype!r}")


# --------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = matmul(g, swapaxes(b))
        gb = matmul(swapaxes(a), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", data, (a, b), vjp)


def swapaxes(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _record("swapaxes", np.swapaxes(a.data, -1, -2), (a,), lambda g: (swapaxes(g),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}") from exc
    return _record("reshape", data, (a,), lambda g: (reshape(g, old),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast {old} -> {shape}") from exc
    return _record("broadcast", data, (a,), lambda g: (_unbroadcast(g, old),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = sorted(ax % len(shape) for ax in axes)
            kshape = list(g.shape)
            for ax in axes:
                kshape.insert(ax, 1)
            g = reshape(g, tuple(kshape))
        elif not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    return _record("sum", data, (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record("slice", a.data[idx], (a,), lambda g: (scatter(g, idx, shape),))


def scatter(g, idx, shape) -> Tensor:
    """Place ``g`` at ``idx`` inside a zero tensor of ``shape`` (adjoint of slicing)."""
    g = as_tensor(g)
    z = np.zeros(shape)
    if _is_basic_index(idx):
        z[idx] = g.data
    else:
        np.add.at(z, idx, g.data)
    return _record("scatter", z, (g,), lambda h: (getitem(h, idx),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items
    )


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat of {[t.shape for t in ts]} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    ndim = data.ndim
    ax = axis % ndim

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _record("concat", data, tuple(ts), vjp)


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = []
    for t in ts:
        shp = list(t.shape)
        shp.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shp)))
    return concat(expanded, axis=axis)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / np.sum(e, axis=axis, keepdims=True)
    out_box = []

    def vjp(g):
        y = out_box[0]
        gy = mul(g, y)
        return (sub(gy, mul(y, tsum(gy, axis=axis, keepdims=True))),)

    out = _record("softmax", data, (a,), vjp)
    out_box.append(out)
    return out


# --------------------------------------------------------------------------
# reverse sweep


def grad(output, inputs, cotangent=None, create_graph=False, allow_unused=True):
    """Gradients of ``output`` w.r.t. each tensor in ``inputs`` in one reverse sweep.

    ``cotangent`` defaults to 1 and then ``output`` must be a scalar.
    Returns a list aligned with ``inputs``; unused inputs get zeros.
    """
    single = isinstance(inputs, Tensor)
    if single:
        inputs = [inputs]
    if cotangent is None:
        if output.size != 1:
            raise NotScalar(f"grad of non-scalar output with shape {output.shape}")
        cotangent = Tensor(np.ones(output.shape))
    else:
        cotangent = as_tensor(cotangent)
        if cotangent.shape != output.shape:
            raise ShapeError(f"cotangent {cotangent.shape} vs output {output.shape}")

    tape = output._tape
    results = [None] * len(inputs)
    if tape is None:
        # output is itself a leaf (or constant)
        for i, x in enumerate(inputs):
            if x is output:
                results[i] = cotangent
        return _finish(results, inputs, single)

    want_nodes = {}
    want_leaves = {}
    for i, x in enumerate(inputs):
        if x._tape is tape:
            want_nodes.setdefault(x._nid, []).append(i)
        else:
            want_leaves.setdefault(id(x), []).append(i)

    cot = {output._nid: cotangent}
    nodes = tape.nodes
    ctx = _resume(tape) if create_graph else no_grad()
    with ctx:
        for idx in range(output._nid, -1, -1):
            g = cot.pop(idx, None)
            if g is None:
                continue
            if idx in want_nodes:
                for i in want_nodes[idx]:
                    results[i] = g
            node = nodes[idx]
            gins = node.vjp(g)
            for inp, gi in zip(node.inputs, gins):
                if gi is None:
                    continue
                if inp._tape is tape:
                    key = inp._nid
                elif inp._tape is None and inp.requires_grad:
                    key = ("leaf", id(inp))
                else:
                    continue
                prev = cot.get(key)
                cot[key] = gi if prev is None else add(prev, gi)
    for lid, idxs in want_leaves.items():
        g = cot.get(("leaf", lid))
        for i in idxs:
            results[i] = g
    return _finish(results, inputs, single)


def _finish(results, inputs, single):
    out = [r if r is not None else Tensor(np.zeros(x.shape)) for r, x in zip(results, inputs)]
    return out[0] if single else out
