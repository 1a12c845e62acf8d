"""Minimal tensor autodiff: taped reverse mode plus nestable forward mode."""

from __future__ import annotations

import numpy as np

from physop.ad import ops
from physop.ad.ops import Dual, new_tag, shape_of, value_of
from physop.ad.tensor import (
    NotScalar,
    ShapeError,
    Tape,
    Tensor,
    Unsupported,
    as_tensor,
    current_tape,
    grad,
    no_grad,
    quantize,
)

__all__ = [
    "Dual",
    "NotScalar",
    "ShapeError",
    "Tape",
    "Tensor",
    "Unsupported",
    "as_tensor",
    "current_tape",
    "grad",
    "jvp",
    "nested_jvp",
    "no_grad",
    "ops",
    "quantize",
    "shape_of",
    "value_of",
    "vjp",
]


def _as_input(x):
    if isinstance(x, (Tensor, Dual)):
        return x
    return Tensor(x)


def _unpack(out, tag):
    if isinstance(out, Dual) and out.tag == tag:
        t = out.tangent
        shape = out.shape
        if t is None:
            t = Tensor(np.zeros(shape))
        elif shape_of(t) != shape:
            t = ops.broadcast_to(t, shape)
        return out.primal, t
    return out, Tensor(np.zeros(shape_of(out)))


def _check_tangents(primals, tangents):
    if len(primals) != len(tangents):
        raise ShapeError(f"{len(primals)} primals but {len(tangents)} tangents")
    for p, t in zip(primals, tangents):
        if t is not None and shape_of(t) != shape_of(p):
            raise ShapeError(f"tangent shape {shape_of(t)} != primal shape {shape_of(p)}")


def jvp(f, primals, tangents):
    """Evaluate ``f(*primals)`` and its directional derivative along ``tangents``.

    Tangents may be ``None`` for inputs held fixed. Returns ``(value, derivative)``.
    """
    primals = [_as_input(p) for p in primals]
    tangents = [None if t is None else _as_input(t) for t in tangents]
    _check_tangents(primals, tangents)
    tag = new_tag()
    out = f(*[Dual(p, t, tag) for p, t in zip(primals, tangents)])
    return _unpack(out, tag)


def nested_jvp(f, primals, directions, return_all=False):
    """Derivative of ``f`` along a sequence of one or two directions.

    ``directions[k]`` is a tuple of tangents, one per primal. For two
    directions ``(d1, d2)`` the result is ``d2 (d1 f)``; with ``d1 == d2 ==
    e_x`` this is the second derivative along ``x``. With ``return_all`` the
    tuple ``(f, d1 f, d2 f, d2 d1 f)`` is returned (or ``(f, d1 f)`` for one
    direction), all from a single evaluation of ``f``.
    """
    order = len(directions)
    if order == 0:
        raise Unsupported("empty direction sequence")
    if order > 2:
        raise Unsupported(f"derivative order {order} > 2 is not supported")
    primals = [_as_input(p) for p in primals]
    if order == 1:
        val, d1 = jvp(f, primals, directions[0])
        return (val, d1) if return_all else d1

    d1s = [None if t is None else _as_input(t) for t in directions[0]]
    d2s = [None if t is None else _as_input(t) for t in directions[1]]
    _check_tangents(primals, d1s)
    _check_tangents(primals, d2s)
    outer, inner = new_tag(), new_tag()
    args = [Dual(Dual(p, t2, outer), t1, inner) for p, t1, t2 in zip(primals, d1s, d2s)]
    out = f(*args)
    prim, tan = _unpack(out, inner)
    val, d2 = _unpack(prim, outer)
    d1, d21 = _unpack(tan, outer)
    return (val, d1, d2, d21) if return_all else d21


def vjp(f, primals, cotangent, create_graph=False):
    """Evaluate ``f`` on fresh leaves and pull ``cotangent`` back to the inputs.

    Returns ``(value, [grad per primal])``. Must be the only consumer of the
    tape it opens unless ``create_graph`` is set by an enclosing tape.
    """
    leaves = [Tensor(np.asarray(value_of(p)), requires_grad=True) for p in primals]
    tape = current_tape()
    if tape is None:
        with Tape():
            out = f(*leaves)
            grads = grad(out, leaves, cotangent, create_graph=create_graph)
    else:
        out = f(*leaves)
        grads = grad(out, leaves, cotangent, create_graph=create_graph)
    return out, grads
