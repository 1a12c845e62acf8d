"""Generic primitives over tensors and forward-mode duals.

A :class:`Dual` pairs a primal with a tangent; both may be tensors or
lower-level duals, which is how JVPs nest. Each dual carries a ``tag`` so
that, when two duals from different nesting levels meet, the outer one
(larger tag) is differentiated and the inner one is treated as constant.
A ``None`` tangent stands for an exact zero and is never materialised.

Tangent arithmetic is expressed with the same generic primitives, so when
the innermost components are taped tensors the whole forward-mode
computation is recorded and can be differentiated in reverse.
"""

from __future__ import annotations

import itertools

import numpy as np

from physop.ad import tensor as T
from physop.ad.tensor import Tensor

_TAGS = itertools.count(1)


def new_tag() -> int:
    return next(_TAGS)


class Dual:
    __slots__ = ("primal", "tangent", "tag")
    __array_priority__ = 2000

    def __init__(self, primal, tangent, tag):
        self.primal = primal
        self.tangent = tangent
        self.tag = tag

    @property
    def shape(self):
        return shape_of(self.primal)

    @property
    def ndim(self):
        return len(self.shape)

    def __repr__(self):
        return f"Dual(tag={self.tag}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, o):
        return pow(self, o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def shape_of(x):
    if isinstance(x, (Tensor, Dual, np.ndarray)):
        return x.shape
    return ()


def value_of(x) -> np.ndarray:
    """Innermost numeric value of a tensor, dual or plain number."""
    while isinstance(x, Dual):
        x = x.primal
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _top(*xs):
    tag = None
    for x in xs:
        if isinstance(x, Dual) and (tag is None or x.tag > tag):
            tag = x.tag
    return tag


def _parts(x, tag):
    if isinstance(x, Dual) and x.tag == tag:
        return x.primal, x.tangent
    return x, None


def _full(t, shape):
    if t is None or shape_of(t) == tuple(shape):
        return t
    return broadcast_to(t, shape)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _is_const(x):
    return not isinstance(x, (Tensor, Dual))


# --------------------------------------------------------------------------
# binary


def add(a, b):
    tag = _top(a, b)
    if tag is None:
        return T.add(a, b)
    ap, at = _parts(a, tag)
    bp, bt = _parts(b, tag)
    return Dual(add(ap, bp), _tadd(at, bt), tag)


def sub(a, b):
    tag = _top(a, b)
    if tag is None:
        return T.sub(a, b)
    ap, at = _parts(a, tag)
    bp, bt = _parts(b, tag)
    if bt is None:
        t = at
    elif at is None:
        t = neg(bt)
    else:
        t = sub(at, bt)
    return Dual(sub(ap, bp), t, tag)


def mul(a, b):
    tag = _top(a, b)
    if tag is None:
        return T.mul(a, b)
    ap, at = _parts(a, tag)
    bp, bt = _parts(b, tag)
    t1 = None if at is None else mul(at, bp)
    t2 = None if bt is None else mul(ap, bt)
    return Dual(mul(ap, bp), _tadd(t1, t2), tag)


def div(a, b):
    tag = _top(a, b)
    if tag is None:
        return T.div(a, b)
    ap, at = _parts(a, tag)
    bp, bt = _parts(b, tag)
    q = div(ap, bp)
    if bt is None:
        t = div(at, bp)
    elif at is None:
        t = neg(div(mul(q, bt), bp))
    else:
        t = div(sub(at, mul(q, bt)), bp)
    return Dual(q, t, tag)


def neg(a):
    if not isinstance(a, Dual):
        return T.neg(a)
    return Dual(neg(a.primal), None if a.tangent is None else neg(a.tangent), a.tag)


def pow(a, c):
    """Power with a constant exponent; a non-constant exponent goes through exp/log."""
    if not _is_const(c):
        return exp(mul(c, log(a)))
    c = float(c)
    if not isinstance(a, Dual):
        return T.pow(a, c)
    ap, at = a.primal, a.tangent
    if at is None:
        t = None
    elif c == 1.0:
        t = at
    elif c == 2.0:
        t = mul(at, mul(ap, 2.0))
    else:
        t = mul(at, mul(pow(ap, c - 1.0), c))
    return Dual(pow(ap, c), t, a.tag)


# --------------------------------------------------------------------------
# unary


def sin(a):
    if not isinstance(a, Dual):
        return T.sin(a)
    t = None if a.tangent is None else mul(a.tangent, cos(a.primal))
    return Dual(sin(a.primal), t, a.tag)


def cos(a):
    if not isinstance(a, Dual):
        return T.cos(a)
    t = None if a.tangent is None else neg(mul(a.tangent, sin(a.primal)))
    return Dual(cos(a.primal), t, a.tag)


def exp(a):
    if not isinstance(a, Dual):
        return T.exp(a)
    y = exp(a.primal)
    t = None if a.tangent is None else mul(a.tangent, y)
    return Dual(y, t, a.tag)


def log(a):
    if not isinstance(a, Dual):
        return T.log(a)
    t = None if a.tangent is None else div(a.tangent, a.primal)
    return Dual(log(a.primal), t, a.tag)


def tanh(a):
    if not isinstance(a, Dual):
        return T.tanh(a)
    y = tanh(a.primal)
    t = None if a.tangent is None else mul(a.tangent, sub(1.0, mul(y, y)))
    return Dual(y, t, a.tag)


def mod1(a):
    if not isinstance(a, Dual):
        return T.mod1(a)
    return Dual(mod1(a.primal), a.tangent, a.tag)


def round_to(a, dtype):
    if not isinstance(a, Dual):
        return T.round_to(a, dtype)
    return Dual(round_to(a.primal, dtype), a.tangent, a.tag)


# --------------------------------------------------------------------------
# linear / structural


def matmul(a, b):
    tag = _top(a, b)
    if tag is None:
        return T.matmul(a, b)
    ap, at = _parts(a, tag)
    bp, bt = _parts(b, tag)
    t1 = None if at is None else matmul(at, bp)
    t2 = None if bt is None else matmul(ap, bt)
    return Dual(matmul(ap, bp), _tadd(t1, t2), tag)


def _linear(fn, a, *args, **kw):
    """Apply a linear structural op to primal and (full-shaped) tangent."""
    if not isinstance(a, Dual):
        return getattr(T, fn)(a, *args, **kw)
    f = globals()[fn]
    t = a.tangent
    t = None if t is None else f(_full(t, a.shape), *args, **kw)
    return Dual(f(a.primal, *args, **kw), t, a.tag)


def swapaxes(a):
    return _linear("swapaxes", a)


def transpose(a, axes=None):
    return _linear("transpose", a, axes)


def reshape(a, shape):
    return _linear("reshape", a, shape)


def broadcast_to(a, shape):
    if not isinstance(a, Dual):
        return T.broadcast_to(a, shape)
    t = None if a.tangent is None else broadcast_to(a.tangent, shape)
    return Dual(broadcast_to(a.primal, shape), t, a.tag)


def tsum(a, axis=None, keepdims=False):
    return _linear("tsum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return _linear("mean", a, axis=axis, keepdims=keepdims)


def getitem(a, idx):
    return _linear("getitem", a, idx)


def concat(items, axis=0):
    items = list(items)
    tag = _top(*items)
    if tag is None:
        return T.concat(items, axis=axis)
    prims, tans = zip(*(_parts(x, tag) for x in items))
    if all(t is None for t in tans):
        tan = None
    else:
        tan = concat(
            [
                Tensor(np.zeros(shape_of(p))) if t is None else _full(t, shape_of(p))
                for p, t in zip(prims, tans)
            ],
            axis=axis,
        )
    return Dual(concat(prims, axis=axis), tan, tag)


def stack(items, axis=0):
    items = list(items)
    expanded = []
    for x in items:
        shp = list(shape_of(x))
        shp.insert(axis % (len(shp) + 1), 1)
        expanded.append(reshape(x, tuple(shp)))
    return concat(expanded, axis=axis)


def softmax(a, axis=-1):
    if not isinstance(a, Dual):
        return T.softmax(a, axis=axis)
    y = softmax(a.primal, axis=axis)
    if a.tangent is None:
        return Dual(y, None, a.tag)
    at = _full(a.tangent, a.shape)
    t = mul(y, sub(at, tsum(mul(y, at), axis=axis, keepdims=True)))
    return Dual(y, t, a.tag)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis only, then apply the affine map."""
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    xhat = mul(xc, pow(add(var, eps), -0.5))
    return add(mul(xhat, gain), bias)


__all__ = [
    "Dual",
    "new_tag",
    "shape_of",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow",
    "sin",
    "cos",
    "exp",
    "log",
    "tanh",
    "mod1",
    "round_to",
    "matmul",
    "swapaxes",
    "transpose",
    "reshape",
    "broadcast_to",
    "tsum",
    "mean",
    "getitem",
    "concat",
    "stack",
    "softmax",
    "layer_norm",
]
