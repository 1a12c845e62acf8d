"""Physics-informed losses and the coordinate-derivative backends.

``compute_pde_loss`` follows the vectorized recipe: one batched decode for the
shared collocation set, derivative channels for the union of leaves the batch
needs, a ``B x M x C`` channel tensor, then per-item residual trees that make
no further network calls.

A *model* here is anything with ``encode(u0, exprs) -> ctx`` and
``decode(ctx, t, x) -> B x M``; see :class:`physop.model.Bound` and
:class:`AnalyticModel`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from physop import symbolic as sym
from physop.ad import Tensor, current_tape, grad, jvp, nested_jvp, ops
from physop.ad.ops import shape_of, value_of
from physop.ad.tensor import Tape, quantize
from physop.datagen import T_GRID, X_GRID
from physop.errors import ConfigError

BACKENDS = ("forward_ad", "reverse_ad", "fdm")
PRECISION_ALIASES = {
    "f64": "f64",
    "f32": "f32",
    "f16": "f16",
    "f16_emulated": "f16",
    "bf16": "bf16",
    "bf16_emulated": "bf16",
}
# unit round-off per format
MACHINE_EPS = {"f64": 2.0**-52, "f32": 2.0**-23, "f16": 2.0**-10, "bf16": 2.0**-7}


class NonFiniteDerivative(FloatingPointError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class StepUnderflow(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class LossWeights:
    pde: float = 1.0
    ic: float = 1.0
    ic_prime: float = 1.0
    data: float = 1.0

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not v >= 0:
                raise ConfigError(f"loss weight {k} must be non-negative, got {v}")

    def as_dict(self):
        return {"pde": self.pde, "ic": self.ic, "ic_prime": self.ic_prime, "data": self.data}


@dataclass(frozen=True)
class DiffBackendConfig:
    backend: str = "forward_ad"
    step: float = 1e-3
    precision: str = "f64"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.precision not in PRECISION_ALIASES:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.backend == "fdm" and not self.step > 0:
            raise ConfigError("fdm step must be positive")

    @property
    def dtype(self):
        return PRECISION_ALIASES[self.precision]


@dataclass
class CollocationSet:
    t: np.ndarray
    x: np.ndarray
    strategy: str = "resample"

    @property
    def M(self):
        return len(self.t)

    @property
    def points(self):
        return np.stack([self.t, self.x], axis=-1)


def sample_collocation(strategy: str, M: int, iteration: int, seed: int) -> CollocationSet:
    """Uniform points on [0,1]^2; ``resample`` keys on (seed, iteration), ``fixed`` on seed."""
    strategy = strategy.lower()
    if M < 1:
        raise ConfigError("need at least one collocation point")
    if strategy == "resample":
        rng = np.random.default_rng([seed, iteration])
    elif strategy == "fixed":
        rng = np.random.default_rng([seed])
    else:
        raise ConfigError(f"unknown collocation strategy {strategy!r}")
    pts = rng.random((M, 2))
    return CollocationSet(pts[:, 0].copy(), pts[:, 1].copy(), strategy)


@dataclass
class Batch:
    """A minibatch: initial conditions, residual expressions and optional labels.

    ``labels`` is ``B x len(label_t) x len(label_x)``, sampled at
    ``T_GRID[label_t]`` x ``X_GRID[label_x]``.
    """

    u0: np.ndarray
    exprs: list
    labels: np.ndarray | None = None
    label_t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    label_x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.exprs)

    @property
    def second_order(self) -> np.ndarray:
        return np.array([e.time_order == 2 for e in self.exprs], dtype=bool)

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows, dtype=int)
        labels = None if self.labels is None else self.labels[rows]
        return Batch(self.u0[rows], [self.exprs[i] for i in rows], labels, self.label_t, self.label_x)


@dataclass
class LossReport:
    pde: float
    ic: float
    ic_prime: float
    data: float
    total: float
    weights: LossWeights
    total_tensor: object = None
    residual: np.ndarray | None = None

    def terms(self):
        return {"pde": self.pde, "ic": self.ic, "ic_prime": self.ic_prime, "data": self.data}


# ---------------------------------------------------------------------------
# analytic stand-in for the network (tests, error-law studies)


class _Rows:
    def __init__(self, n):
        self.batch = n

    def select(self, rows):
        return _Rows(len(np.arange(self.batch)[rows]))


class AnalyticModel:
    """Wraps ``fn(t, x)`` (written with :mod:`physop.ad.ops`) as a batch-independent model."""

    def __init__(self, fn):
        self.fn = fn

    def encode(self, u0, exprs):
        return _Rows(len(exprs))

    def decode(self, ctx, t, x):
        M = shape_of(t)[0]
        out = self.fn(t, x)
        if shape_of(out) != (M,):
            out = ops.broadcast_to(out, (M,))
        return ops.broadcast_to(ops.reshape(out, (1, M)), (ctx.batch, M))


# ---------------------------------------------------------------------------
# derivative backends


def _check_finite(name, arr):
    v = value_of(arr)
    bad = ~np.isfinite(v)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteDerivative(f"non-finite {name} at (b, m) = {idx}", idx)


def ad_derivatives(model, ctx, t, x, needed):
    """Forward-mode channels: nested JVPs along e_x and e_t."""
    M = len(t)
    ones = np.ones(M)
    f = lambda tt, xx: model.decode(ctx, tt, xx)  # noqa: E731
    out = {}
    if "u_xx" in needed:
        out["u"], ux, _, out["u_xx"] = nested_jvp(f, (t, x), [(None, ones), (None, ones)], True)
        if "u_x" in needed:
            out["u_x"] = ux
    elif "u_x" in needed:
        out["u"], out["u_x"] = jvp(f, (t, x), (None, ones))
    if "u_tt" in needed:
        u, ut, _, out["u_tt"] = nested_jvp(f, (t, x), [(ones, None), (ones, None)], True)
        out.setdefault("u", u)
        if "u_t" in needed:
            out["u_t"] = ut
    elif "u_t" in needed:
        u, out["u_t"] = jvp(f, (t, x), (ones, None))
        out.setdefault("u", u)
    if "u" not in out:
        out["u"] = f(t, x)
    return out


# number of single-output VJP sweeps issued by the reverse backend
VJP_CALLS = [0]


def reverse_derivatives(model, ctx, t, x, needed):
    """Per-output coordinate derivatives by one-hot VJP sweeps.

    Every ``(b, m)`` entry needs its own sweep (and another per second
    derivative), which is the cost this backend exists to exhibit. Without
    an active tape the sweeps run on a private one and the channels come
    back as plain values.
    """
    if current_tape() is None:
        with Tape():
            out = _reverse_sweeps(model, ctx, t, x, needed)
        return {k: np.array(value_of(v)) for k, v in out.items()}
    return _reverse_sweeps(model, ctx, t, x, needed)


def _reverse_sweeps(model, ctx, t, x, needed):
    T = Tensor(np.asarray(t, dtype=np.float64), requires_grad=True)
    X = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    U = model.decode(ctx, T, X)
    B, M = shape_of(U)
    first = [d for d in ("u_t", "u_x") if d in needed or d + d[-1] in needed]
    cols = {d: [] for d in needed}
    for b in range(B):
        for m in range(M):
            W = np.zeros((B, M))
            W[b, m] = 1.0
            gt, gx = grad(U, [T, X], W, create_graph=True)
            VJP_CALLS[0] += 1
            g = {"u_t": gt, "u_x": gx}
            e_m = np.zeros(M)
            e_m[m] = 1.0
            for d in first:
                if d in needed:
                    cols[d].append(ops.getitem(g[d], slice(m, m + 1)))
                dd = d + d[-1]
                if dd in needed:
                    wrt = T if d == "u_t" else X
                    h = grad(ops.tsum(ops.mul(g[d], e_m)), wrt, create_graph=True)
                    VJP_CALLS[0] += 1
                    cols[dd].append(ops.getitem(h, slice(m, m + 1)))
    out = {"u": U}
    for d, parts in cols.items():
        out[d] = ops.reshape(ops.concat(parts, axis=0), (B, M))
    return out


def _check_step(coords, step, dtype):
    if dtype == "f64":
        moved = (coords + step) - coords
    else:
        c = quantize(np.asarray(coords, dtype=np.float64), dtype)
        s = quantize(np.asarray([step], dtype=np.float64), dtype)
        moved = quantize(c + s, dtype) - c
    if np.any(moved == 0):
        raise StepUnderflow(f"step {step:g} vanishes against coordinates in {dtype}")


def fdm_derivatives(model, ctx, t, x, step, precision="f64", needed=sym.DERIVATIVES):
    """Central differences from one decode over stacked shifted blocks.

    Blocks are ``[center, t+h, t-h, x+h, x-h]`` (t or x pairs dropped when
    not needed). Model outputs are rounded to ``precision`` before
    differencing; the rounding has a straight-through gradient.
    """
    dtype = PRECISION_ALIASES.get(precision, precision)
    t = np.asarray(value_of(t), dtype=np.float64)
    x = np.asarray(value_of(x), dtype=np.float64)
    h = float(step)
    if not h > 0:
        raise ConfigError("fdm step must be positive")
    need_t = bool({"u_t", "u_tt"} & set(needed))
    need_x = bool({"u_x", "u_xx"} & set(needed))
    ts, xs = [t], [x]
    if need_t:
        _check_step(t, h, dtype)
        ts += [t + h, t - h]
        xs += [x, x]
    if need_x:
        _check_step(x, h, dtype)
        ts += [t, t]
        xs += [x + h, x - h]
    M = len(t)
    U = model.decode(ctx, np.concatenate(ts), np.concatenate(xs))
    if dtype != "f64":
        U = ops.round_to(U, dtype)
    blocks = [ops.getitem(U, (slice(None), slice(k * M, (k + 1) * M))) for k in range(len(ts))]
    out = {"u": blocks[0]}
    k = 1
    for axis, want in (("t", need_t), ("x", need_x)):
        if not want:
            continue
        up, dn = blocks[k], blocks[k + 1]
        k += 2
        if f"u_{axis}" in needed:
            out[f"u_{axis}"] = ops.mul(ops.sub(up, dn), 1.0 / (2 * h))
        if f"u_{axis}{axis}" in needed:
            lap = ops.add(ops.sub(up, ops.mul(blocks[0], 2.0)), dn)
            out[f"u_{axis}{axis}"] = ops.mul(lap, 1.0 / (h * h))
    return out


def derivatives(model, ctx, t, x, needed, backend: DiffBackendConfig):
    needed = frozenset(needed)
    if backend.backend == "forward_ad":
        out = ad_derivatives(model, ctx, t, x, needed)
    elif backend.backend == "reverse_ad":
        out = reverse_derivatives(model, ctx, t, x, needed)
    else:
        out = fdm_derivatives(model, ctx, t, x, backend.step, backend.dtype, needed)
    for name, arr in out.items():
        _check_finite(name, arr)
    return out


# ---------------------------------------------------------------------------
# step-size analysis


def optimal_step_size(eps: float, n: int, R_n: float) -> float:
    """Step balancing truncation and round-off: ``(eps / R_n) ** (1 / (n + 2))``.

    Only proportional to the true optimum; the stencil constant is absorbed.
    """
    if not (eps > 0 and R_n > 0) or n not in (1, 2):
        raise ValueError("need eps > 0, R_n > 0 and n in {1, 2}")
    return (eps / R_n) ** (1.0 / (n + 2))


def predicted_min_rel_error(eps: float, n: int, R_n: float) -> float:
    """Relative error floor at the optimal step: ``eps^(2/(n+2)) * R_n^(n/(n+2))``."""
    if not (eps >= 0 and R_n > 0) or n not in (1, 2):
        raise ValueError("need eps >= 0, R_n > 0 and n in {1, 2}")
    return eps ** (2.0 / (n + 2)) * R_n ** (n / (n + 2.0))


def fdm_error_curve(steps, precision="f64", fn=None, d2=None, n_points=64, seed=0):
    """Relative RMS error of the FDM ``u_xx`` channel for each step in ``steps``.

    Defaults to ``sin(2 pi x)`` at ``n_points`` uniform random points, which
    averages out the point-to-point scatter of the rounding errors.
    """
    if fn is None:
        fn = lambda t, x: ops.sin(ops.mul(x, 2 * np.pi))  # noqa: E731
        d2 = lambda t, x: -((2 * np.pi) ** 2) * np.sin(2 * np.pi * x)  # noqa: E731
    rng = np.random.default_rng(seed)
    x = rng.random(n_points)
    t = np.zeros(n_points)
    model = AnalyticModel(fn)
    ctx = _Rows(1)
    ref = d2(t, x)
    errs = []
    for h in steps:
        got = value_of(fdm_derivatives(model, ctx, t, x, h, precision, {"u_xx"})["u_xx"])[0]
        errs.append(float(np.sqrt(np.sum((got - ref) ** 2) / np.sum(ref**2))))
    return np.array(errs)


# ---------------------------------------------------------------------------
# losses


def _mean_sq(r):
    return ops.mean(ops.mul(r, r))


def compute_pde_loss(model, batch: Batch, TX: CollocationSet, backend=None, ctx=None):
    """Returns ``(loss, residual B x M)``; both may be taped tensors."""
    backend = backend or DiffBackendConfig()
    if ctx is None:
        ctx = model.encode(batch.u0, batch.exprs)
    needed = sym.required_derivatives(batch.exprs)
    ch = derivatives(model, ctx, TX.t, TX.x, needed, backend)
    U = ch["u"]
    zero = np.zeros(shape_of(U))
    Z = ops.stack([ch.get(name, zero) for name in sym.CHANNELS], axis=-1)
    rows = [sym.eval_residual(e.tree, ops.getitem(Z, b)) for b, e in enumerate(batch.exprs)]
    R = ops.stack(rows, axis=0)
    return _mean_sq(R), R


def compute_ic_loss(model, batch: Batch, ctx=None):
    if ctx is None:
        ctx = model.encode(batch.u0, batch.exprs)
    U = model.decode(ctx, np.zeros(len(X_GRID)), X_GRID)
    return _mean_sq(ops.sub(U, np.asarray(batch.u0)))


def compute_ic_prime_loss(model, batch: Batch, backend=None, ctx=None):
    """Mean squared ``u_t(0, x)`` over second-order items; 0 if there are none."""
    backend = backend or DiffBackendConfig()
    rows = np.flatnonzero(batch.second_order)
    if rows.size == 0:
        return Tensor(0.0)
    if ctx is None:
        ctx = model.encode(batch.u0, batch.exprs)
    ch = derivatives(model, ctx.select(rows), np.zeros(len(X_GRID)), X_GRID, {"u_t"}, backend)
    return _mean_sq(ch["u_t"])


def label_points(label_t, label_x):
    tt, xx = np.meshgrid(T_GRID[label_t], X_GRID[label_x], indexing="ij")
    return tt.ravel(), xx.ravel()


def compute_data_loss(model, batch: Batch, ctx=None):
    if batch.labels is None or batch.labels.size == 0:
        return Tensor(0.0)
    if ctx is None:
        ctx = model.encode(batch.u0, batch.exprs)
    t, x = label_points(batch.label_t, batch.label_x)
    U = model.decode(ctx, t, x)
    return _mean_sq(ops.sub(U, batch.labels.reshape(len(batch), -1)))


def total_loss(model, batch: Batch, weights: LossWeights, TX, backend=None, data_batch=None):
    """Weighted sum of the four terms; zero-weight terms are never evaluated.

    ``data_batch`` supplies labels when the supervised set differs from the
    physics batch (sparse-function regime); by default ``batch`` is used.
    """
    backend = backend or DiffBackendConfig()
    ctx = model.encode(batch.u0, batch.exprs)
    parts = {}
    residual = None
    if weights.pde > 0:
        parts["pde"], residual = compute_pde_loss(model, batch, TX, backend, ctx)
    if weights.ic > 0:
        parts["ic"] = compute_ic_loss(model, batch, ctx)
    if weights.ic_prime > 0 and batch.second_order.any():
        parts["ic_prime"] = compute_ic_prime_loss(model, batch, backend, ctx)
    if weights.data > 0:
        db = batch if data_batch is None else data_batch
        dctx = ctx if data_batch is None else model.encode(db.u0, db.exprs)
        parts["data"] = compute_data_loss(model, db, dctx)
    total = None
    w = weights.as_dict()
    for k, v in parts.items():
        term = ops.mul(v, w[k])
        total = term if total is None else ops.add(total, term)
    if total is None:
        total = Tensor(0.0)
    vals = {k: float(value_of(parts[k])) if k in parts else 0.0 for k in w}
    return LossReport(
        vals["pde"],
        vals["ic"],
        vals["ic_prime"],
        vals["data"],
        float(value_of(total)),
        weights,
        total,
        None if residual is None else np.array(value_of(residual)),
    )


def _sweep(net, params, batch, weights, TX, backend, data_batch):
    from physop.model import Bound

    with Tape():
        leaves = params.leaves()
        model = Bound(net, leaves)
        report = total_loss(model, batch, weights, TX, backend, data_batch)
        names = list(leaves)
        if isinstance(report.total_tensor, Tensor) and report.total_tensor._tape is not None:
            gs = grad(report.total_tensor, [leaves[n] for n in names])
            g = params.flatten_grads(dict(zip(names, gs)))
        else:
            g = np.zeros(params.size)
    report.total_tensor = None
    return report, g


def loss_and_grad(net, params, batch, weights, TX, backend=None, data_batch=None, chunks=1):
    """Total loss and its flat parameter gradient (one reverse sweep).

    With ``chunks > 1`` the rows are split into groups that are swept one at a
    time and combined with weights proportional to each group's share of every
    term, which gives the full-batch loss and gradient with a fraction of the
    tape memory.
    """
    chunks = max(1, min(int(chunks), len(batch)))
    if chunks == 1:
        return _sweep(net, params, batch, weights, TX, backend, data_batch)
    groups = np.array_split(np.arange(len(batch)), chunks)
    dgroups = groups if data_batch is None else np.array_split(np.arange(len(data_batch)), chunks)
    n2 = int(batch.second_order.sum())
    nd = len(batch) if data_batch is None else len(data_batch)
    w = weights.as_dict()
    acc = dict.fromkeys(w, 0.0)
    residual, g = [], np.zeros(params.size)
    for rows, drows in zip(groups, dgroups):
        sub = batch.take(rows)
        f = len(rows) / len(batch)
        f2 = sub.second_order.sum() / n2 if n2 else 0.0
        fd = len(drows) / nd if nd else 0.0
        share = {"pde": f, "ic": f, "ic_prime": f2, "data": fd}
        sw = LossWeights(**{k: w[k] * share[k] for k in w})
        db = None if data_batch is None else data_batch.take(drows)
        rep, gc = _sweep(net, params, sub, sw, TX, backend, db)
        g += gc
        for k, v in rep.terms().items():
            acc[k] += share[k] * v
        if rep.residual is not None:
            residual.append(rep.residual)
    total = sum(w[k] * acc[k] for k in w)
    res = np.concatenate(residual) if residual else None
    return LossReport(acc["pde"], acc["ic"], acc["ic_prime"], acc["data"], total, weights, None, res), g
