"""Initial conditions, reference solutions and datasets for the 13 families.

Ground truth comes from a method-of-lines solver: Fourier differentiation on
a 256-point periodic grid (the 128-point initial condition is upsampled
spectrally) and classical RK4 in time. Second-order-in-time families are
integrated as ``(u, v = u_t)`` with ``v(0) = 0``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from physop.errors import ConfigError
from physop.symbolic import Family, build_residual

NT, NX = 64, 128
FINE_NX = 256
T_GRID = np.arange(NT) / NT
X_GRID = np.arange(NX) / NX
EVEN_T = np.arange(0, NT, 2)
ODD_T = np.arange(1, NT, 2)

MAGIC = b"PIMF"
FORMAT_VERSION = 1


class SolverDiverged(RuntimeError):
    pass


class DegenerateSignal(ValueError):
    pass


# ---------------------------------------------------------------------------
# initial conditions and parameters


@dataclass(frozen=True)
class ICSpec:
    amplitudes: tuple
    phases: tuple
    wavenumbers: tuple  # integer n_j; k_j = 2 pi n_j / L_x
    seed: int
    lo: float = 0.0  # raw min over the grid, used for Min-Max normalization
    hi: float = 1.0
    length: float = 1.0

    def raw(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for a, ph, n in zip(self.amplitudes, self.phases, self.wavenumbers):
            out = out + a * np.sin(2 * np.pi * n / self.length * x + ph)
        return out

    def __call__(self, x):
        return (self.raw(x) - self.lo) / (self.hi - self.lo)


def sample_ic(seed: int, n_waves: int = 2, n_max: int = 4, nx: int = NX):
    """Random superposition of sines, Min-Max normalized on the grid.

    A constant draw is rejected and redrawn with ``seed + 1``.
    """
    x = np.arange(nx) / nx
    while True:
        rng = np.random.default_rng(seed)
        amps = rng.uniform(0.0, 1.0, n_waves)
        phases = rng.uniform(0.0, 2 * np.pi, n_waves)
        ns = rng.integers(1, n_max + 1, n_waves)
        spec = ICSpec(tuple(amps), tuple(phases), tuple(int(n) for n in ns), seed)
        raw = spec.raw(x)
        lo, hi = float(raw.min()), float(raw.max())
        if hi - lo > 1e-12 * max(1.0, abs(hi)):
            break
        seed += 1
    spec = ICSpec(spec.amplitudes, spec.phases, spec.wavenumbers, seed, lo, hi)
    return spec, (raw - lo) / (hi - lo)


def sample_params(family, seed) -> tuple:
    """Uniform draw from [0.9, 1.1] x the family's parameter centers."""
    fam = Family.lookup(family)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centers = np.asarray(fam.spec.centers)
    return tuple(float(v) for v in rng.uniform(0.9 * centers, 1.1 * centers))


# ---------------------------------------------------------------------------
# reference solver


def _speed_and_diffusivity(fam, params):
    q = params[:, 0]
    p = params[:, 1] if params.shape[1] > 1 else None
    if fam is Family.ADV:
        return np.abs(q), 0.0
    if fam in (Family.DIFF, Family.DIFF_LIN, Family.DIFF_LOG, Family.DIFF_SLOG, Family.DIFF_BI):
        return 0.0, q
    if fam in (Family.CONS_CUB, Family.CONS_LIN, Family.CONS_SIN, Family.BURGERS):
        return np.abs(q), p / np.pi
    if fam in (Family.WAVE, Family.KG):
        return np.abs(q), 0.0
    return 1.0, 0.0  # SG: unit wave speed


def time_step(fam, params, nx: int = FINE_NX) -> float:
    dx = 1.0 / nx
    speed, nu = _speed_and_diffusivity(fam, np.atleast_2d(params))
    dt = 1e-3
    speed = float(np.max(speed))
    nu = float(np.max(nu))
    if speed > 0:
        dt = min(dt, 0.2 * dx / speed)
    if nu > 0:
        dt = min(dt, 0.2 * dx * dx / (2 * nu))
    return dt


class _Spectral:
    def __init__(self, n):
        self.n = n
        k = 2 * np.pi * np.fft.rfftfreq(n, d=1.0 / n)
        self.ik = 1j * k
        self.ik[-1] = 0.0  # odd derivative of the Nyquist mode
        self.k2 = k * k
        kmax = n // 2
        self.dealias = (np.arange(k.size) <= (2 * kmax) // 3).astype(np.float64)

    def fwd(self, u):
        return np.fft.rfft(u, axis=-1)

    def inv(self, uh):
        return np.fft.irfft(uh, n=self.n, axis=-1)


def upsample(u: np.ndarray, n: int) -> np.ndarray:
    """Spectral (band-limited) interpolation of periodic samples onto ``n`` points."""
    m = u.shape[-1]
    uh = np.fft.rfft(u, axis=-1)
    if m % 2 == 0:
        uh[..., -1] *= 0.5
    out = np.zeros(u.shape[:-1] + (n // 2 + 1,), dtype=complex)
    out[..., : uh.shape[-1]] = uh
    return np.fft.irfft(out, n=n, axis=-1) * (n / m)


def _rhs_factory(fam, params, sp: _Spectral):
    q = params[:, :1]
    p = params[:, 1:2] if params.shape[1] > 1 else None
    ik, k2, mask = sp.ik, sp.k2, sp.dealias

    def nonlinear(fn, uh):
        return mask * sp.fwd(fn(sp.inv(uh)))

    if fam is Family.ADV:
        return lambda uh: -q * ik * uh
    if fam is Family.DIFF:
        return lambda uh: -q * k2 * uh
    if fam is Family.DIFF_LIN:
        return lambda uh: -q * k2 * uh + p * uh
    if fam in (Family.DIFF_LOG, Family.DIFF_SLOG, Family.DIFF_BI):
        reaction = {
            Family.DIFF_LOG: lambda u: u * (1 - u),
            Family.DIFF_SLOG: lambda u: u**2 * (1 - u) ** 2,
            Family.DIFF_BI: lambda u: u**2 * (1 - u),
        }[fam]
        return lambda uh: -q * k2 * uh + p * nonlinear(reaction, uh)
    if fam in (Family.CONS_CUB, Family.CONS_LIN, Family.CONS_SIN, Family.BURGERS):
        nu = p / np.pi
        if fam is Family.CONS_LIN:
            return lambda uh: -q * ik * uh - nu * k2 * uh
        flux = {
            Family.CONS_CUB: lambda u: u**3 / 3,
            Family.CONS_SIN: np.sin,
            Family.BURGERS: lambda u: u**2 / 2,
        }[fam]
        return lambda uh: -q * ik * nonlinear(flux, uh) - nu * k2 * uh
    # second order: u_tt = F(u)
    if fam is Family.WAVE:
        return lambda uh: -(q * q) * k2 * uh
    if fam is Family.KG:
        return lambda uh: -(p * p * q**4) * uh - (q * q) * k2 * uh
    if fam is Family.SG:
        return lambda uh: -q * nonlinear(np.sin, uh) - k2 * uh
    raise ValueError(fam)


def solve_batch(family, params, u0, dt_scale: float = 1.0, nx_fine: int = FINE_NX):
    """Solve ``K`` instances of one family at once; returns ``K x 64 x 128``.

    ``params`` is ``K x P``, ``u0`` is ``K x 128``. ``dt_scale`` shrinks the
    step (0.5 halves it) for self-convergence checks.
    """
    fam = Family.lookup(family)
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    u0 = np.atleast_2d(np.asarray(u0, dtype=np.float64))
    if u0.shape[-1] != NX:
        raise ValueError(f"u0 must have {NX} samples, got {u0.shape[-1]}")
    sp = _Spectral(nx_fine)
    rhs = _rhs_factory(fam, params, sp)
    dt_max = time_step(fam, params, nx_fine) * dt_scale
    n_sub = int(math.ceil((1.0 / NT) / dt_max - 1e-9))
    dt = (1.0 / NT) / n_sub
    stride = nx_fine // NX

    uh = sp.fwd(upsample(u0, nx_fine))
    second = fam.spec.time_order == 2
    if second:
        state = np.stack([uh, np.zeros_like(uh)])

        def f(s):
            return np.stack([s[1], rhs(s[0])])
    else:
        state = uh
        f = rhs

    out = np.empty((u0.shape[0], NT, NX))
    for it in range(NT):
        u = sp.inv(state[0] if second else state)
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 1e6:
            bad = int(np.argmax(~np.isfinite(u).all(axis=-1) | (np.abs(u).max(axis=-1) > 1e6)))
            raise SolverDiverged(
                f"{fam.spec.abbrev} diverged at t={it / NT:.4f} for params {params[bad].tolist()}"
            )
        out[:, it] = u0 if it == 0 else u[:, ::stride]
        if it == NT - 1:
            break
        for _ in range(n_sub):
            k1 = f(state)
            k2 = f(state + 0.5 * dt * k1)
            k3 = f(state + 0.5 * dt * k2)
            k4 = f(state + dt * k3)
            state = state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


def solve(family, params, u0, dt_scale: float = 1.0) -> np.ndarray:
    """Single-instance wrapper around :func:`solve_batch` (64 x 128 grid)."""
    return solve_batch(family, np.atleast_2d(params), np.atleast_2d(u0), dt_scale)[0]


# ---------------------------------------------------------------------------
# noise


def add_noise(D, gamma: float, seed) -> np.ndarray:
    """``D + gamma * ||D|| / ||z|| * z`` with ``z`` standard normal.

    The realised relative L2 noise magnitude is exactly ``gamma``.
    """
    D = np.asarray(D, dtype=np.float64)
    if gamma < 0:
        raise ValueError("noise level must be non-negative")
    if gamma == 0:
        return D.copy()
    norm = np.linalg.norm(D)
    if norm == 0:
        raise DegenerateSignal("cannot scale noise to a zero signal")
    z = np.random.default_rng(seed).standard_normal(D.shape)
    return D + gamma * (norm / np.linalg.norm(z)) * z


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    family: Family
    params: np.ndarray  # K x P
    u0: np.ndarray  # K x 128
    solution: np.ndarray  # K x 64 x 128
    seeds: list = field(default_factory=list)
    split: str = "train"
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.u0)

    @property
    def symbols(self) -> list[str]:
        return [build_residual(self.family, p).text for p in self.params]

    def expressions(self):
        return [build_residual(self.family, p) for p in self.params]

    def subset(self, n: int) -> "Dataset":
        return Dataset(
            self.family,
            self.params[:n],
            self.u0[:n],
            self.solution[:n],
            self.seeds[:n],
            self.split,
            dict(self.manifest, count=n),
        )


def generate(family, count: int, seed: int, split: str = "train") -> Dataset:
    """Sample ``count`` instances of one family and solve them."""
    fam = Family.lookup(family)
    params, u0s, seeds = [], [], []
    for i in range(count):
        ss = np.random.SeedSequence([int(seed), int(fam), i])
        ic_seed, p_seed = (int(s) for s in ss.generate_state(2))
        spec, u0 = sample_ic(ic_seed)
        params.append(sample_params(fam, p_seed))
        u0s.append(u0)
        seeds.append(spec.seed)
    params = np.array(params)
    u0s = np.array(u0s)
    sol = solve_batch(fam, params, u0s)
    manifest = {
        "family": fam.spec.abbrev,
        "family_id": int(fam),
        "count": count,
        "nt": NT,
        "nx": NX,
        "seed": seed,
        "split": split,
        "noise_gamma": 0.0,
    }
    return Dataset(fam, params, u0s, sol, seeds, split, manifest)


def write_dataset(ds: Dataset, path) -> Path:
    """Write the binary record file plus ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    K, P = ds.params.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, int(ds.family), K, NT, NX, P))
        for i in range(K):
            fh.write(np.ascontiguousarray(ds.params[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.u0[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.solution[i], dtype="<f8").tobytes())
    manifest = dict(ds.manifest)
    manifest.update(
        family=ds.family.spec.abbrev,
        family_id=int(ds.family),
        count=K,
        nt=NT,
        nx=NX,
        split=ds.split,
        symbols=ds.symbols,
        ic_seeds=[int(s) for s in ds.seeds],
    )
    manifest_path(path).write_text(json.dumps(manifest, indent=1))
    return path


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path} is not a dataset file")
    version, fam_id, K, nt, nx, P = struct.unpack_from("<6I", raw, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset version {version}")
    rec = P + nx + nt * nx
    body = np.frombuffer(raw, dtype="<f8", offset=28)
    if body.size != K * rec:
        raise ConfigError(f"{path}: expected {K} records of {rec} values")
    body = body.reshape(K, rec).astype(np.float64)
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return Dataset(
        Family(fam_id),
        body[:, :P].copy(),
        body[:, P : P + nx].copy(),
        body[:, P + nx :].reshape(K, nt, nx).copy(),
        manifest.get("ic_seeds", []),
        manifest.get("split", "train"),
        manifest,
    )


# ---------------------------------------------------------------------------
# labelled sub-grids

SPARSE_RESOLUTIONS = {(2, 8), (4, 16), (8, 32), (16, 64), (32, 128)}
PARTIAL_SPANS = {2, 4, 8, 16, 32}


def label_grid(scenario: str, value=None):
    """Time and space indices of the labelled training points.

    ``sparse_grid`` takes ``(nt, nx)`` and returns a uniform subset of the even
    time slices; ``partial_time`` takes the number of leading even slices;
    anything else uses every even slice and every x.
    """
    if scenario == "sparse_grid":
        try:
            nt, nx = (int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"sparse_grid needs (nt, nx), got {value!r}") from None
        if (nt, nx) not in SPARSE_RESOLUTIONS:
            raise ConfigError(f"unsupported sparse resolution {nt}x{nx}")
        return EVEN_T[:: len(EVEN_T) // nt], np.arange(0, NX, NX // nx)
    if scenario == "partial_time":
        if value not in PARTIAL_SPANS:
            raise ConfigError(f"unsupported temporal span {value!r}")
        return EVEN_T[: int(value)], np.arange(NX)
    if scenario in ("full", "sparse_func", "noisy", "collocation_study", None):
        return EVEN_T.copy(), np.arange(NX)
    raise ConfigError(f"unknown scenario {scenario!r}")


def make_split(spec: dict, out_dir) -> dict:
    """Generate train/val/test files for every family in ``spec``.

    ``spec`` keys: ``families``, ``counts`` (train/val/test), ``seed``,
    ``scenario`` and its ``value``; optional ``n_func`` truncates the
    training split and ``gamma`` is recorded for noisy runs.
    """
    scenario = spec.get("scenario", "full")
    value = spec.get("value")
    if scenario == "sparse_grid" and value is not None:
        value = tuple(value)
    t_idx, x_idx = label_grid(scenario, value)
    counts = spec.get("counts", {"train": 200, "val": 100, "test": 100})
    n_func = spec.get("n_func")
    if n_func is not None and (int(n_func) < 1 or int(n_func) > counts["train"]):
        raise ConfigError(f"n_func={n_func} outside 1..{counts['train']}")
    seed = int(spec.get("seed", 0))
    out_dir = Path(out_dir)
    written = {}
    for (abbrev, split), ds in generate_splits(spec["families"], counts, seed).items():
        if split == "train" and n_func is not None:
            ds = ds.subset(int(n_func))
        ds.manifest.update(
            scenario=scenario,
            scenario_value=value if value is None else list(np.atleast_1d(value).tolist()),
            label_t=t_idx.tolist(),
            label_x=x_idx.tolist(),
            noise_gamma=float(spec.get("gamma", 0.0)),
        )
        written[(abbrev, split)] = write_dataset(ds, out_dir / f"{abbrev}_{split}.bin")
    return written


def generate_splits(families, counts, seed: int = 0) -> dict:
    """``{(abbrev, split): Dataset}`` for train/val/test; empty splits are skipped.

    Each split draws from its own seed stream, so the splits never share instances.
    """
    out = {}
    for fam_key in families:
        fam = Family.lookup(fam_key)
        for k, split in enumerate(("train", "val", "test")):
            n = int(counts.get(split, 0))
            if n > 0:
                out[(fam.spec.abbrev, split)] = generate(fam, n, int(seed) * 7919 + k, split)
    return out
