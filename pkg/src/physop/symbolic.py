"""Polish-notation PDE residuals: tokens, expression trees, and their evaluation.

A residual such as ``u_t + 0.514 u_x`` is written in prefix order as::

    add u_t mul add N514 E-3 u_x

where the triple ``add N<m> E<e>`` is a single constant ``m * 10**e``. The
``add`` in that position is a marker, recognised by its mantissa/exponent
operands, and never means arithmetic addition.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from physop.ad import Dual, Tensor, ops, value_of

CHANNELS = ("u", "u_t", "u_tt", "u_x", "u_xx")
DERIVATIVES = CHANNELS[1:]
CHANNEL_INDEX = {name: i for i, name in enumerate(CHANNELS)}

ARITY = {
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "pow": 2,
    "neg": 1,
    "sin": 1,
    "cos": 1,
    "exp": 1,
}

MANTISSA_DIGITS = 7


class SymbolicError(ValueError):
    pass


class InvalidConstant(SymbolicError):
    pass


class UnexpectedEnd(SymbolicError):
    pass


class TrailingTokens(SymbolicError):
    pass


class MalformedExpression(SymbolicError):
    pass


class UnknownFamily(SymbolicError):
    pass


class NonFiniteResidual(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# tokens


@dataclass(frozen=True)
class Token:
    kind: str  # "operator" | "derivative-leaf" | "solution-leaf" | "mantissa" | "exponent"
    payload: object

    def __str__(self):
        if self.kind == "mantissa":
            return f"N{self.payload}"
        if self.kind == "exponent":
            return f"E{self.payload}"
        return str(self.payload)


def _leaf_kind(name):
    return "solution-leaf" if name == "u" else "derivative-leaf"


def token_from_str(s: str) -> Token:
    if s in ARITY:
        return Token("operator", s)
    if s in CHANNEL_INDEX:
        return Token(_leaf_kind(s), s)
    if len(s) > 1 and s[0] in "NE":
        try:
            n = int(s[1:])
        except ValueError:
            raise MalformedExpression(f"bad numeric token {s!r}") from None
        return Token("mantissa" if s[0] == "N" else "exponent", n)
    raise MalformedExpression(f"unknown token {s!r}")


def tokenize(text: str) -> list[Token]:
    return [token_from_str(s) for s in text.split()]


def to_text(tokens: Iterable[Token]) -> str:
    return " ".join(str(t) for t in tokens)


# ---------------------------------------------------------------------------
# constants


def encode_constant(v: float) -> tuple[Token, Token, Token]:
    """Encode ``v`` as ``(add, N<m>, E<e>)`` with at most MANTISSA_DIGITS significant digits."""
    v = float(v)
    if not math.isfinite(v) or abs(v) >= 1e15:
        raise InvalidConstant(f"cannot encode {v!r}")
    if v == 0.0:
        m, e = 0, 0
    else:
        # correctly rounded decimal formatting does the round-to-nearest
        digits, exp10 = f"{v:.{MANTISSA_DIGITS - 1}e}".split("e")
        m = int(digits.replace(".", ""))
        e = int(exp10) - (MANTISSA_DIGITS - 1)
        while m % 10 == 0:
            m //= 10
            e += 1
    return Token("operator", "add"), Token("mantissa", m), Token("exponent", e)


def decode_constant(mantissa: int, exponent: int) -> float:
    return float(f"{mantissa}e{exponent}")


def quantize_constant(v: float) -> float:
    """The value a constant takes after one encode/decode trip."""
    _, m, e = encode_constant(v)
    return decode_constant(m.payload, e.payload)


# ---------------------------------------------------------------------------
# expression trees


@dataclass(frozen=True)
class Expr:
    kind: str  # "operator" | "leaf" | "constant"
    name: str = ""
    children: tuple = ()
    value: float = 0.0

    def __str__(self):
        return to_text(serialize(self))


def Op(name, *children) -> Expr:
    if name not in ARITY:
        raise MalformedExpression(f"unknown operator {name!r}")
    if len(children) != ARITY[name]:
        raise MalformedExpression(f"{name} takes {ARITY[name]} operands, got {len(children)}")
    return Expr("operator", name, tuple(children))


def Leaf(name) -> Expr:
    if name not in CHANNEL_INDEX:
        raise MalformedExpression(f"unknown leaf {name!r}")
    return Expr("leaf", name)


def Const(v) -> Expr:
    return Expr("constant", value=quantize_constant(v))


def parse(tokens: Sequence[Token] | str) -> Expr:
    """Prefix-order recursive descent that must consume every token."""
    if isinstance(tokens, str):
        tokens = tokenize(tokens)
    tokens = list(tokens)
    if not tokens:
        raise UnexpectedEnd("empty token sequence")
    tree, pos = _parse_at(tokens, 0)
    if pos != len(tokens):
        rest = to_text(tokens[pos:])
        raise TrailingTokens(f"{len(tokens) - pos} unconsumed tokens: {rest!r}")
    return tree


def _parse_at(tokens, i):
    if i >= len(tokens):
        raise UnexpectedEnd(f"expression ends after {i} tokens")
    tok = tokens[i]
    if tok.kind == "operator":
        name = tok.payload
        if name == "add" and i + 1 < len(tokens) and tokens[i + 1].kind == "mantissa":
            if i + 2 >= len(tokens):
                raise UnexpectedEnd("constant is missing its exponent")
            ex = tokens[i + 2]
            if ex.kind != "exponent":
                raise MalformedExpression(f"expected exponent after N{tokens[i + 1].payload}")
            value = decode_constant(tokens[i + 1].payload, ex.payload)
            return Expr("constant", value=value), i + 3
        children = []
        pos = i + 1
        for _ in range(ARITY[name]):
            child, pos = _parse_at(tokens, pos)
            children.append(child)
        return Expr("operator", name, tuple(children)), pos
    if tok.kind in ("solution-leaf", "derivative-leaf"):
        return Expr("leaf", tok.payload), i + 1
    raise MalformedExpression(f"{tok} at position {i} is not an operand or operator")


def serialize(tree: Expr) -> list[Token]:
    out: list[Token] = []
    _serialize_into(tree, out)
    return out


def _serialize_into(tree, out):
    if tree.kind == "constant":
        out.extend(encode_constant(tree.value))
    elif tree.kind == "leaf":
        out.append(Token(_leaf_kind(tree.name), tree.name))
    else:
        out.append(Token("operator", tree.name))
        for c in tree.children:
            _serialize_into(c, out)


def leaves(tree: Expr) -> frozenset:
    if tree.kind == "leaf":
        return frozenset([tree.name])
    acc = frozenset()
    for c in tree.children:
        acc |= leaves(c)
    return acc


# ---------------------------------------------------------------------------
# PDE families


class Family(enum.IntEnum):
    ADV = 0
    DIFF = 1
    DIFF_LIN = 2
    DIFF_LOG = 3
    DIFF_SLOG = 4
    DIFF_BI = 5
    CONS_CUB = 6
    CONS_LIN = 7
    CONS_SIN = 8
    BURGERS = 9
    WAVE = 10
    KG = 11
    SG = 12

    @classmethod
    def lookup(cls, key) -> "Family":
        if isinstance(key, Family):
            return key
        if isinstance(key, (int, np.integer)):
            try:
                return cls(int(key))
            except ValueError:
                raise UnknownFamily(f"no family with id {key}") from None
        norm = str(key).strip().lower().replace("_", "-").rstrip("'")
        for fam, spec in FAMILIES.items():
            if norm in (spec.abbrev.lower(), fam.name.lower().replace("_", "-")):
                return fam
        raise UnknownFamily(f"unknown PDE family {key!r}")

    @property
    def spec(self) -> "FamilySpec":
        return FAMILIES[self]


@dataclass(frozen=True)
class FamilySpec:
    abbrev: str
    title: str
    centers: tuple
    time_order: int = 1


FAMILIES = {
    Family.ADV: FamilySpec("Adv", "Advection", (0.5,)),
    Family.DIFF: FamilySpec("Diff", "Diffusion", (0.003,)),
    Family.DIFF_LIN: FamilySpec("Diff-Lin", "Diffusion Linear Reaction", (0.003, 0.1)),
    Family.DIFF_LOG: FamilySpec("Diff-Log", "Diffusion Logistic Reaction", (0.003, 1.0)),
    Family.DIFF_SLOG: FamilySpec("Diff-SLog", "Diffusion Square Logistic Reaction", (0.003, 1.0)),
    Family.DIFF_BI: FamilySpec("Diff-Bi", "Diffusion Bistable Reaction", (0.003, 1.0)),
    Family.CONS_CUB: FamilySpec("Cons-Cub", "Conservation Law with Cubic Flux", (1.0, 0.01)),
    Family.CONS_LIN: FamilySpec("Cons-Lin", "Conservation Law with Linear Flux", (1.0, 0.01)),
    Family.CONS_SIN: FamilySpec("Cons-Sin", "Conservation Law with Sine Flux", (1.0, 0.01)),
    Family.BURGERS: FamilySpec("Burgers", "Burgers'", (1.0, 0.01)),
    Family.WAVE: FamilySpec("Wave", "Wave", (0.5,), time_order=2),
    Family.KG: FamilySpec("KG", "Klein-Gordon", (1.0, 0.1), time_order=2),
    Family.SG: FamilySpec("SG", "Sine-Gordon", (1.0,), time_order=2),
}


def _residual_tree(fam: Family, q: float, p: float | None) -> Expr:
    u, u_t, u_tt, u_x, u_xx = (Leaf(c) for c in CHANNELS)
    one, two = Const(1.0), Const(2.0)

    def diffusion_reaction(reaction):
        return Op("sub", u_t, Op("add", Op("mul", Const(q), u_xx), Op("mul", Const(p), reaction)))

    def conservation(flux_x):
        # u_t + q * (flux)_x - (p/pi) u_xx, flux derivative expanded by the chain rule
        return Op(
            "sub",
            Op("add", u_t, Op("mul", Const(q), flux_x)),
            Op("mul", Const(p / math.pi), u_xx),
        )

    if fam is Family.ADV:
        return Op("add", u_t, Op("mul", Const(q), u_x))
    if fam is Family.DIFF:
        return Op("sub", u_t, Op("mul", Const(q), u_xx))
    if fam is Family.DIFF_LIN:
        return diffusion_reaction(u)
    if fam is Family.DIFF_LOG:
        return diffusion_reaction(Op("mul", u, Op("sub", one, u)))
    if fam is Family.DIFF_SLOG:
        return diffusion_reaction(
            Op("mul", Op("pow", u, two), Op("pow", Op("sub", one, u), two))
        )
    if fam is Family.DIFF_BI:
        return diffusion_reaction(Op("mul", Op("pow", u, two), Op("sub", one, u)))
    if fam is Family.CONS_CUB:
        return conservation(Op("mul", Op("pow", u, two), u_x))
    if fam is Family.CONS_LIN:
        return conservation(u_x)
    if fam is Family.CONS_SIN:
        return conservation(Op("mul", Op("cos", u), u_x))
    if fam is Family.BURGERS:
        return conservation(Op("mul", u, u_x))
    if fam is Family.WAVE:
        return Op("sub", u_tt, Op("mul", Const(q * q), u_xx))
    if fam is Family.KG:
        return Op(
            "sub",
            Op("add", u_tt, Op("mul", Const(p * p * q**4), u)),
            Op("mul", Const(q * q), u_xx),
        )
    if fam is Family.SG:
        return Op("sub", Op("add", u_tt, Op("mul", Const(q), Op("sin", u))), u_xx)
    raise UnknownFamily(str(fam))


@dataclass(frozen=True)
class PdeExpression:
    family: Family
    params: tuple
    tree: Expr
    tokens: tuple = field(repr=False)
    derivative_set: frozenset = frozenset()
    time_order: int = 1

    @property
    def text(self) -> str:
        return to_text(self.tokens)


def build_residual(family, params) -> PdeExpression:
    """Canonical residual "time-derivative term minus right-hand side" for a family."""
    fam = Family.lookup(family)
    params = tuple(float(v) for v in np.atleast_1d(params))
    n = len(fam.spec.centers)
    if len(params) != n:
        raise ValueError(f"{fam.spec.abbrev} takes {n} parameter(s), got {len(params)}")
    q = params[0]
    p = params[1] if n > 1 else None
    tree = _residual_tree(fam, q, p)
    derivs = leaves(tree) & frozenset(DERIVATIVES)
    return PdeExpression(
        family=fam,
        params=params,
        tree=tree,
        tokens=tuple(serialize(tree)),
        derivative_set=derivs,
        time_order=2 if "u_tt" in derivs else 1,
    )


def required_derivatives(exprs) -> frozenset:
    """Derivative leaves used by one expression, or the union over a batch."""
    if isinstance(exprs, (PdeExpression, Expr)):
        exprs = [exprs]
    acc = frozenset()
    for e in exprs:
        tree = e.tree if isinstance(e, PdeExpression) else e
        acc |= leaves(tree) & frozenset(DERIVATIVES)
    return acc


# ---------------------------------------------------------------------------
# evaluation

_NUMPY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "pow": np.power,
    "neg": np.negative,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
}

_AD_OPS = {
    "add": ops.add,
    "sub": ops.sub,
    "mul": ops.mul,
    "div": ops.div,
    "pow": ops.pow,
    "neg": ops.neg,
    "sin": ops.sin,
    "cos": ops.cos,
    "exp": ops.exp,
}


def eval_residual(tree: Expr, Z):
    """Evaluate ``tree`` on a channel array ``Z`` of shape ``(..., C)``.

    Channels follow :data:`CHANNELS`. ``Z`` may be a numpy array or a
    (taped) tensor; the result has ``Z``'s shape minus the channel axis.
    Non-finite intermediate values raise :class:`NonFiniteResidual`.
    """
    if isinstance(tree, PdeExpression):
        tree = tree.tree
    if isinstance(Z, (Tensor, Dual)):
        table, pick = _AD_OPS, lambda i: ops.getitem(Z, (Ellipsis, i))
    else:
        Z = np.asarray(Z, dtype=np.float64)
        table, pick = _NUMPY_OPS, lambda i: Z[..., i]
    if ops.shape_of(Z)[-1] != len(CHANNELS):
        raise ValueError(f"expected {len(CHANNELS)} channels, got shape {ops.shape_of(Z)}")
    with np.errstate(all="ignore"):
        out = _eval(tree, table, pick)
    if not isinstance(out, (Tensor, Dual, np.ndarray)):
        out = np.full(ops.shape_of(Z)[:-1], out)
    return out


def _eval(tree, table, pick):
    if tree.kind == "constant":
        return tree.value
    if tree.kind == "leaf":
        return pick(CHANNEL_INDEX[tree.name])
    args = [_eval(c, table, pick) for c in tree.children]
    if tree.name == "pow" and tree.children[1].kind == "constant":
        exponent = args[1]
        base = value_of(args[0])
        if exponent != int(exponent) and np.any(base < 0):
            raise NonFiniteResidual(f"pow of negative base with exponent {exponent}")
    if tree.name == "div" and np.any(value_of(args[1]) == 0):
        raise NonFiniteResidual("division by zero in residual")
    out = table[tree.name](*args)
    if not np.all(np.isfinite(value_of(out))):
        raise NonFiniteResidual(f"non-finite value after {tree.name}")
    return out
