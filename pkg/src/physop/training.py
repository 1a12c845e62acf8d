"""Learning-rate schedule, AdamW, scenario-driven training and zero-shot fine-tuning."""

from __future__ import annotations

import ctypes
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from physop.datagen import EVEN_T, Dataset, add_noise, label_grid
from physop.errors import ConfigError
from physop.losses import (
    Batch,
    DiffBackendConfig,
    LossWeights,
    loss_and_grad,
    sample_collocation,
)
from physop.metrics import evaluate
from physop.model import ModelParams, OperatorNet, save_checkpoint
from physop.symbolic import Family

SCENARIOS = ("sparse_grid", "partial_time", "sparse_func", "noisy", "collocation_study", "finetune")


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimizer


@dataclass(frozen=True)
class ScheduleConfig:
    T_warmup: int = 3200
    T_max: int = 32000
    alpha: float = 1e-4

    def __post_init__(self):
        if not 0 < self.T_warmup < self.T_max:
            raise ConfigError(f"need 0 < T_warmup < T_max, got {self.T_warmup}, {self.T_max}")


def lr_at(t, sched: ScheduleConfig) -> float:
    """Linear warmup ``alpha * t / T_warmup`` then cosine decay to 0 at ``T_max``."""
    t = min(float(t), float(sched.T_max))
    if t <= sched.T_warmup:
        return sched.alpha * max(t, 0.0) / sched.T_warmup
    frac = (t - sched.T_warmup) / (sched.T_max - sched.T_warmup)
    return 0.5 * (1.0 + math.cos(frac * math.pi)) * sched.alpha


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 1e-4

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState, lr: float):
    """One AdamW update in place: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.

    Returns ``(params, state)``. A non-finite gradient leaves both untouched.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteGradient(f"{bad.size} non-finite gradient entries, first at {bad[0]}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    params -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * params)
    return params, state


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class ScenarioConfig:
    scenario: str = "sparse_grid"
    families: tuple = ("Adv", "Diff")
    resolution: tuple = (4, 16)  # sparse_grid / collocation_study labels
    span: int = 32  # partial_time: leading even slices that carry labels
    n_func: int | None = None  # sparse_func / noisy: labelled functions per family
    gamma: float = 0.0  # noisy
    collocation: int = 100
    strategy: str = "resample"
    target_family: str | None = None  # finetune
    physics: bool = True
    batch_size: int = 16
    data_batch_size: int = 16
    iterations: int = 2000
    T_warmup: int = 200
    alpha: float = 1e-4
    weight_decay: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    backend: DiffBackendConfig = field(default_factory=DiffBackendConfig)
    val_every: int = 100
    val_size: int = 16
    seed: int = 0
    grad_chunks: int = 1  # sweep the batch in row groups to bound tape memory

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.backend, dict):
            self.backend = DiffBackendConfig(**self.backend)
        self.families = tuple(Family.lookup(f).spec.abbrev for f in self.families)
        self.resolution = tuple(self.resolution)
        if self.scenario == "finetune" and self.target_family is None:
            raise ConfigError("finetune scenario needs target_family")
        if self.iterations < 1 or self.batch_size < 1 or self.grad_chunks < 1:
            raise ConfigError("iterations, batch_size and grad_chunks must be positive")
        if self.gamma < 0:
            raise ConfigError("noise level gamma must be non-negative")
        self.label_indices()  # validates resolution / span

    @property
    def effective_weights(self) -> LossWeights:
        w = self.weights
        if self.scenario == "finetune":
            w = replace(w, data=0.0)
        if not self.physics:
            w = replace(w, pde=0.0, ic=0.0, ic_prime=0.0)
        return w

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.T_warmup, self.iterations, self.alpha)

    def label_indices(self):
        if self.scenario in ("sparse_grid", "collocation_study"):
            return label_grid("sparse_grid", self.resolution)
        if self.scenario == "partial_time":
            return label_grid("partial_time", self.span)
        return label_grid("full")

    def to_dict(self):
        d = asdict(self)
        d["families"] = list(self.families)
        d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# training


def tune_allocator():
    """Keep freed numpy buffers in the heap instead of returning them to the OS.

    Each iteration allocates and frees the same few hundred arrays; without
    this glibc maps fresh pages for every large buffer.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 64 << 20)  # M_TOP_PAD
    except (OSError, AttributeError):
        pass


class _Pool:
    """Training items drawn uniformly over the union of families."""

    def __init__(self, datasets, t_idx, x_idx, n_func=None, gamma=0.0, seed=0):
        self.items = []  # (dataset index, row)
        self.datasets = list(datasets)
        self.t_idx, self.x_idx = t_idx, x_idx
        self.exprs = [ds.expressions() for ds in self.datasets]
        self.labels = []
        for k, ds in enumerate(self.datasets):
            self.items += [(k, i) for i in range(len(ds))]
        self.labelled = []
        for k, ds in enumerate(self.datasets):
            n = len(ds) if n_func is None else min(n_func, len(ds))
            self.labelled += [(k, i) for i in range(n)]
        self.seed = seed
        self.gamma = gamma

    def build_labels(self):
        # noise is added once, over the whole labelled array of each family
        self.labels = []
        for k, ds in enumerate(self.datasets):
            n = sum(1 for kk, _ in self.labelled if kk == k)
            lab = ds.solution[:n][:, self.t_idx][:, :, self.x_idx]
            if self.gamma > 0 and n > 0:
                lab = add_noise(lab, self.gamma, [self.seed, k])
            self.labels.append(lab)

    def batch(self, rows, with_labels=True) -> Batch:
        u0 = np.stack([self.datasets[k].u0[i] for k, i in rows])
        exprs = [self.exprs[k][i] for k, i in rows]
        if not with_labels:
            return Batch(u0, exprs)
        lab = np.stack([self.labels[k][i] for k, i in rows])
        return Batch(u0, exprs, lab, self.t_idx, self.x_idx)


@dataclass
class TrainResult:
    params: ModelParams  # best validation checkpoint
    final_params: ModelParams
    log: list
    best_val: float
    best_iteration: int


def _validate(net, params, val_sets, n):
    reps = [evaluate(net, params, ds, n=n, h1_source="grid") for ds in val_sets]
    l2 = float(np.mean(np.concatenate([r.l2 for r in reps])))
    h1 = float(np.mean(np.concatenate([r.h1 for r in reps])))
    return l2, h1


def train(
    scenario: ScenarioConfig,
    net: OperatorNet,
    params: ModelParams,
    train_sets,
    val_sets=(),
    log_path=None,
    ckpt_path=None,
    callback=None,
) -> TrainResult:
    """Optimise ``params`` in place under ``scenario``; returns the best-validation copy.

    ``callback(iteration, params)`` runs after every optimizer step (used for
    error trajectories).
    """
    tune_allocator()
    fam_names = {Family.lookup(f) for f in scenario.families}
    for ds in train_sets:
        if not isinstance(ds, Dataset):
            raise ConfigError("train_sets must be Dataset objects")
    if scenario.scenario != "finetune":
        got = {ds.family for ds in train_sets}
        if got != fam_names:
            raise ConfigError(
                f"datasets cover {sorted(f.spec.abbrev for f in got)} but scenario lists "
                f"{sorted(scenario.families)}"
            )
    weights = scenario.effective_weights
    t_idx, x_idx = scenario.label_indices()
    n_func = scenario.n_func if scenario.scenario in ("sparse_func", "noisy") else None
    pool = _Pool(train_sets, t_idx, x_idx, n_func, scenario.gamma, scenario.seed)
    if weights.data > 0:
        pool.build_labels()
    separate_data = n_func is not None
    rng = np.random.default_rng([scenario.seed, 1])
    sched = scenario.schedule
    state = OptimizerState.zeros(params.size, weight_decay=scenario.weight_decay)
    log = []
    best = (math.inf, 0, params.copy())
    fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
    t0 = time.perf_counter()

    def record(it, lr, report):
        rec = {"iteration": it, "lr": lr}
        if report is not None:
            rec.update(report.terms())
            rec["total"] = report.total
        rec["val_L2"] = None
        rec["val_H1"] = None
        if val_sets and (it % scenario.val_every == 0 or it == scenario.iterations):
            rec["val_L2"], rec["val_H1"] = _validate(net, params, val_sets, scenario.val_size)
        rec["wall_time"] = time.perf_counter() - t0
        log.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")
        return rec

    try:
        rec = record(0, 0.0, None)
        if rec["val_L2"] is not None:
            best = (rec["val_L2"], 0, params.copy())
        for it in range(1, scenario.iterations + 1):
            pick = rng.choice(len(pool.items), scenario.batch_size, replace=False)
            rows = [pool.items[i] for i in pick]
            TX = sample_collocation(scenario.strategy, scenario.collocation, it, scenario.seed)
            if separate_data and weights.data > 0:
                physics_batch = pool.batch(rows, with_labels=False)
                drows = [
                    pool.labelled[i]
                    for i in rng.choice(
                        len(pool.labelled),
                        min(scenario.data_batch_size, len(pool.labelled)),
                        replace=False,
                    )
                ]
                data_batch = pool.batch(drows)
            else:
                physics_batch = pool.batch(rows, with_labels=weights.data > 0)
                data_batch = None
            report, g = loss_and_grad(
                net, params, physics_batch, weights, TX, scenario.backend, data_batch,
                scenario.grad_chunks,
            )
            lr = lr_at(it, sched)
            optimizer_step(params.flat, g, state, lr)
            rec = record(it, lr, report)
            if rec["val_L2"] is not None and rec["val_L2"] < best[0]:
                best = (rec["val_L2"], it, params.copy())
            if callback is not None:
                callback(it, params)
    finally:
        if fh:
            fh.close()
    best_params = best[2] if val_sets else params.copy()
    if ckpt_path:
        save_checkpoint(
            ckpt_path, best_params, best[1], {"scenario": scenario.to_dict(), "val_L2": best[0]}
        )
    return TrainResult(best_params, params.copy(), log, best[0], best[1])


def finetune_zero_shot(
    net: OperatorNet,
    pretrained: ModelParams,
    target_family,
    scenario: ScenarioConfig,
    target_inputs: Dataset,
    pretrain_families,
    test_set: Dataset | None = None,
    eval_every: int = 100,
    eval_size: int = 32,
    log_path=None,
    ckpt_path=None,
):
    """Physics-only adaptation to an unseen family.

    ``target_inputs`` supplies initial conditions and parameters only; its
    solution grids are never read. ``test_set`` (optional) is used to log the
    error trajectory, starting with the zero-shot error at iteration 0.
    Returns ``(TrainResult, trajectory)`` with trajectory rows
    ``(iteration, mean L2, mean H1)``.
    """
    target = Family.lookup(target_family)
    pre = {Family.lookup(f) for f in pretrain_families}
    if target in pre:
        raise ConfigError(f"{target.spec.abbrev} was seen during pretraining")
    sc = replace(
        scenario,
        scenario="finetune",
        target_family=target.spec.abbrev,
        families=(target.spec.abbrev,),
        physics=True,
    )
    params = pretrained.copy()
    trajectory = []

    def score(it, p):
        if test_set is not None and (it % eval_every == 0 or it == sc.iterations):
            rep = evaluate(net, p, test_set, n=eval_size, h1_source="grid")
            trajectory.append((it, rep.mean_l2, rep.mean_h1))

    score(0, params)
    res = train(sc, net, params, [target_inputs], (), log_path, ckpt_path, callback=score)
    return res, trajectory
