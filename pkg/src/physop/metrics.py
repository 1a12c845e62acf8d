"""Relative L2 / H1 errors and batched evaluation of a trained network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from physop.ad import jvp, no_grad
from physop.ad.ops import value_of
from physop.datagen import NT, NX, ODD_T, T_GRID, X_GRID

PERCENTILES = (25, 50, 75)


class DegenerateReference(ValueError):
    pass


def l2_rel(u_true, u_pred) -> float:
    """``||u - v|| / ||u||`` with uniform-grid quadrature (the cell size cancels)."""
    u = np.asarray(u_true, dtype=np.float64)
    v = np.asarray(u_pred, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"grid mismatch {u.shape} vs {v.shape}")
    scale = np.max(np.abs(u), initial=0.0)
    if scale == 0:
        raise DegenerateReference("reference field has zero L2 norm")
    # scaling by max|u| keeps the squares clear of underflow and overflow
    u, v = u / scale, v / scale
    return float(np.sqrt(np.sum((u - v) ** 2) / np.sum(u * u)))


def grid_gradients(u, dt=1.0 / NT, dx=1.0 / NX):
    """``(u_t, u_x)`` by central differences on a ``(..., nt, nx)`` grid.

    One-sided first-order differences at the two temporal ends; x wraps
    periodically.
    """
    u = np.asarray(u, dtype=np.float64)
    ut = np.gradient(u, dt, axis=-2, edge_order=1)
    ux = (np.roll(u, -1, axis=-1) - np.roll(u, 1, axis=-1)) / (2 * dx)
    return ut, ux


def h1_rel(u_true, u_pred, d_true=None, d_pred=None) -> float:
    """H1 relative error with ``||u||_H1^2 = ||u||^2 + ||u_t||^2 + ||u_x||^2``.

    ``d_true`` / ``d_pred`` are ``(u_t, u_x)`` pairs on the same points as the
    values; when omitted they come from :func:`grid_gradients`.
    """
    u = np.asarray(u_true, dtype=np.float64)
    v = np.asarray(u_pred, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"grid mismatch {u.shape} vs {v.shape}")
    du = grid_gradients(u) if d_true is None else d_true
    dv = grid_gradients(v) if d_pred is None else d_pred
    pairs = [(u, v)] + [(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)) for a, b in zip(du, dv)]
    scale = max(np.max(np.abs(a), initial=0.0) for a, _ in pairs)
    if scale == 0:
        raise DegenerateReference("reference field has zero H1 norm")
    num = sum(np.sum(((a - b) / scale) ** 2) for a, b in pairs)
    den = sum(np.sum((a / scale) ** 2) for a, _ in pairs)
    return float(np.sqrt(num / den))


@dataclass
class MetricReport:
    l2: np.ndarray
    h1: np.ndarray
    groups: dict = field(default_factory=dict)  # key -> per-instance labels

    @property
    def mean_l2(self):
        return float(np.mean(self.l2))

    @property
    def mean_h1(self):
        return float(np.mean(self.h1))

    def percentiles(self, which="l2"):
        vals = self.l2 if which == "l2" else self.h1
        return {p: float(np.percentile(vals, p)) for p in PERCENTILES}

    def by(self, key):
        """Mean L2/H1 per value of a grouping key."""
        labels = np.asarray(self.groups[key])
        out = {}
        for g in dict.fromkeys(labels.tolist()):
            sel = labels == g
            out[g] = (float(np.mean(self.l2[sel])), float(np.mean(self.h1[sel])))
        return out

    def summary(self):
        return {
            "mean_L2": self.mean_l2,
            "mean_H1": self.mean_h1,
            "L2_percentiles": self.percentiles("l2"),
            "H1_percentiles": self.percentiles("h1"),
            "count": int(len(self.l2)),
        }

    @staticmethod
    def concat(reports):
        groups = {}
        for r in reports:
            for k, v in r.groups.items():
                groups.setdefault(k, []).extend(list(v))
        return MetricReport(
            np.concatenate([r.l2 for r in reports]), np.concatenate([r.h1 for r in reports]), groups
        )


def predict(net, params, u0, exprs, t_idx, chunk=4096, derivatives=False):
    """Network predictions on the ``T_GRID[t_idx] x X_GRID`` grid, ``B x nt x nx``.

    With ``derivatives`` also returns forward-mode ``(u_t, u_x)`` on the same grid.
    """
    from physop.model import Bound

    model = Bound(net, params)
    tt, xx = np.meshgrid(T_GRID[t_idx], X_GRID, indexing="ij")
    t, x = tt.ravel(), xx.ravel()
    vals, uts, uxs = [], [], []
    with no_grad():
        ctx = model.encode(u0, exprs)
        f = lambda a, b: model.decode(ctx, a, b)  # noqa: E731
        for lo in range(0, len(t), chunk):
            ts, xs = t[lo : lo + chunk], x[lo : lo + chunk]
            if derivatives:
                ones = np.ones(len(ts))
                v, ut = jvp(f, (ts, xs), (ones, None))
                _, ux = jvp(f, (ts, xs), (None, ones))
                uts.append(value_of(ut))
                uxs.append(value_of(ux))
            else:
                v = f(ts, xs)
            vals.append(value_of(v))
    shape = (len(exprs), len(t_idx), len(X_GRID))
    U = np.concatenate(vals, axis=1).reshape(shape)
    if not derivatives:
        return U
    return U, (np.concatenate(uts, 1).reshape(shape), np.concatenate(uxs, 1).reshape(shape))


def evaluate(net, params, dataset, n=None, h1_source="forward_ad", t_idx=ODD_T, batch=16):
    """Per-instance L2 / H1 on the given time slices (test slices by default).

    Ground-truth derivatives come from :func:`grid_gradients` on the full
    64 x 128 grid. Prediction derivatives use forward mode, or the same grid
    differences on a full-grid prediction when ``h1_source == "grid"``.
    """
    n = len(dataset) if n is None else min(n, len(dataset))
    exprs = dataset.expressions()[:n]
    t_idx = np.asarray(t_idx)
    l2s, h1s = [], []
    for lo in range(0, n, batch):
        hi = min(n, lo + batch)
        truth = dataset.solution[lo:hi]
        gt, gx = grid_gradients(truth)
        if h1_source == "grid":
            full = predict(net, params, dataset.u0[lo:hi], exprs[lo:hi], np.arange(NT))
            pt, px = grid_gradients(full)
            pred = full[:, t_idx]
            pt, px = pt[:, t_idx], px[:, t_idx]
        else:
            pred, (pt, px) = predict(
                net, params, dataset.u0[lo:hi], exprs[lo:hi], t_idx, derivatives=True
            )
        for i in range(hi - lo):
            u = truth[i, t_idx]
            l2s.append(l2_rel(u, pred[i]))
            h1s.append(h1_rel(u, pred[i], (gt[i, t_idx], gx[i, t_idx]), (pt[i], px[i])))
    groups = {"family": [dataset.family.spec.abbrev] * n}
    return MetricReport(np.array(l2s), np.array(h1s), groups)


def error_vs_time(net, params, dataset, n=None, t_idx=ODD_T):
    """Mean L2 relative error per time slice (rows of the returned array follow ``t_idx``)."""
    n = len(dataset) if n is None else min(n, len(dataset))
    pred = predict(net, params, dataset.u0[:n], dataset.expressions()[:n], t_idx)
    truth = dataset.solution[:n][:, t_idx]
    per = np.sqrt(np.sum((truth - pred) ** 2, axis=-1) / np.sum(truth**2, axis=-1))
    return per.mean(axis=0)
