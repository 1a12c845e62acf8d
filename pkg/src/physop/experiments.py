"""Experiment configs, study orchestration and CSV emission.

A config is a JSON object::

    {"version": 1, "name": "...", "seed": 0,
     "data": {"families": ["Adv", "Diff"], "counts": {"train": 200, "val": 50, "test": 100}},
     "model": {...ModelConfig fields...},
     "training": {...ScenarioConfig fields...},
     "study": {"kind": "collocation", "values": [20, 100], "strategies": ["resample", "fixed"]},
     "eval": {"n_test": 100, "h1_source": "grid"}}

Every study writes ``summary.csv`` plus one study-specific CSV. Floats are
written with 17 significant digits so reruns with the same seeds are
byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import time
import tracemalloc
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from physop.ad.ops import value_of
from physop.datagen import EVEN_T, ODD_T, T_GRID, generate, generate_splits
from physop.errors import ConfigError
from physop.losses import (
    Batch,
    DiffBackendConfig,
    LossWeights,
    compute_pde_loss,
    derivatives,
    loss_and_grad,
    sample_collocation,
)
from physop.metrics import MetricReport, error_vs_time, evaluate, h1_rel, l2_rel
from physop.model import Bound, ModelConfig, OperatorNet
from physop.training import ScenarioConfig, finetune_zero_shot, train

CONFIG_VERSION = 1
STUDIES = ("single", "resolution", "partial_time", "n_func", "noise", "collocation", "fdm_step", "finetune")
ARMS = ("physics", "data_only")
# desk-scale network; every field can be overridden from the config
DESK_MODEL = {"embed_dim": 32, "heads": 2, "patch": 16}
STUDY_CSV = {
    "single": "metrics.csv",
    "resolution": "error_vs_resolution.csv",
    "partial_time": "error_vs_span.csv",
    "n_func": "error_vs_nfunc.csv",
    "noise": "error_vs_noise.csv",
    "collocation": "error_vs_collocation.csv",
    "fdm_step": "error_vs_fdm_step.csv",
    "finetune": "finetune_summary.csv",
}
BENCH_COLUMNS = ("backend", "precision", "step", "L2_rel_err", "H1_rel_err", "wall_time_s", "peak_alloc_bytes")


def fmt(v):
    """CSV cell: floats with 17 significant digits, everything else via str."""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (list, tuple)):
        return "x".join(str(a) for a in v)
    return "" if v is None else str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        cells = [r[h] for h in header] if isinstance(r, dict) else r
        w.writerow([fmt(c) for c in cells])
    path.write_text(buf.getvalue())
    return path


# ---------------------------------------------------------------------------
# config validation


def _check_type(value, typ, path):
    ok = isinstance(value, typ) and not (typ in (int, float) and isinstance(value, bool))
    if typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if not ok:
        name = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise ConfigError(f"{path}: expected {name}, got {type(value).__name__}")


def _check_keys(obj, allowed, path):
    _check_type(obj, dict, path)
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}: unknown key")


def _dataclass_section(obj, cls, path):
    _check_keys(obj, [f.name for f in fields(cls)], path)
    try:
        return cls(**obj)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(src) -> dict:
    if isinstance(src, dict):
        return json.loads(json.dumps(src))
    path = Path(src)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def validate_config(cfg) -> dict:
    """Check the schema and fill defaults; raises ConfigError naming the bad path."""
    cfg = load_config(cfg)
    _check_keys(cfg, ("version", "name", "seed", "data", "model", "training", "study", "eval"), "$")
    version = cfg.get("version", CONFIG_VERSION)
    _check_type(version, int, "$.version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"$.version: unsupported config version {version}")
    out = {"version": version, "name": cfg.get("name", "experiment"), "seed": cfg.get("seed", 0)}
    _check_type(out["name"], str, "$.name")
    _check_type(out["seed"], int, "$.seed")

    data = cfg.get("data", {})
    _check_keys(data, ("families", "counts"), "$.data")
    fams = data.get("families", ["Adv", "Diff"])
    _check_type(fams, list, "$.data.families")
    counts = dict({"train": 200, "val": 50, "test": 100}, **data.get("counts", {}))
    _check_keys(counts, ("train", "val", "test"), "$.data.counts")
    for k, v in counts.items():
        _check_type(v, int, f"$.data.counts.{k}")
        if v < 0:
            raise ConfigError(f"$.data.counts.{k}: must be non-negative")
    out["data"] = {"families": list(fams), "counts": counts}

    model = dict(DESK_MODEL, **cfg.get("model", {}))
    out["model"] = _dataclass_section(model, ModelConfig, "$.model")

    training = dict(cfg.get("training", {}))
    training.setdefault("families", list(fams))
    training.setdefault("alpha", 1e-3)
    out["training"] = _dataclass_section(training, ScenarioConfig, "$.training")
    if sorted(out["training"].families) != sorted(
        ScenarioConfig(families=tuple(fams)).families
    ) and out["training"].scenario != "finetune":
        raise ConfigError("$.training.families: must match $.data.families")

    study = dict(cfg.get("study", {}))
    _check_keys(
        study,
        ("kind", "values", "strategies", "precisions", "arms", "target_family", "finetune_iterations", "eval_every"),
        "$.study",
    )
    kind = study.setdefault("kind", "single")
    if kind not in STUDIES:
        raise ConfigError(f"$.study.kind: unknown study {kind!r}")
    study.setdefault("values", [None])
    _check_type(study["values"], list, "$.study.values")
    arms = study.setdefault("arms", ["physics"])
    _check_type(arms, list, "$.study.arms")
    for i, a in enumerate(arms):
        if a not in ARMS:
            raise ConfigError(f"$.study.arms[{i}]: unknown arm {a!r}")
    study.setdefault("strategies", ["resample"])
    study.setdefault("precisions", ["f64"])
    if kind == "finetune" and "target_family" not in study:
        raise ConfigError("$.study.target_family: required for finetune studies")
    study.setdefault("finetune_iterations", out["training"].iterations)
    study.setdefault("eval_every", 100)
    out["study"] = study

    ev = dict({"n_test": 100, "h1_source": "grid"}, **cfg.get("eval", {}))
    _check_keys(ev, ("n_test", "h1_source"), "$.eval")
    _check_type(ev["n_test"], int, "$.eval.n_test")
    if ev["h1_source"] not in ("grid", "forward_ad"):
        raise ConfigError(f"$.eval.h1_source: unknown source {ev['h1_source']!r}")
    out["eval"] = ev
    return out


def config_to_dict(cfg) -> dict:
    """JSON-serializable form of a validated config."""
    d = dict(cfg)
    d["model"] = asdict(cfg["model"])
    d["training"] = cfg["training"].to_dict()
    return d


# ---------------------------------------------------------------------------
# runs


def _variants(cfg):
    """``(value, arm, ScenarioConfig)`` for every run of a (non-finetune) study."""
    base: ScenarioConfig = cfg["training"]
    study = cfg["study"]
    kind = study["kind"]
    out = []
    for value in study["values"]:
        if kind == "single":
            sc = [base]
        elif kind == "resolution":
            sc = [replace(base, scenario="sparse_grid", resolution=tuple(value))]
        elif kind == "partial_time":
            sc = [replace(base, scenario="partial_time", span=int(value))]
        elif kind == "n_func":
            sc = [replace(base, scenario="sparse_func", n_func=int(value))]
        elif kind == "noise":
            sc = [replace(base, scenario="noisy", gamma=float(value))]
        elif kind == "collocation":
            sc = [
                replace(base, scenario="collocation_study", collocation=int(value), strategy=s)
                for s in study["strategies"]
            ]
        elif kind == "fdm_step":
            sc = [
                replace(base, backend=DiffBackendConfig("fdm", float(value), p))
                for p in study["precisions"]
            ]
        else:
            raise ConfigError(f"$.study.kind: {kind} has no variants")
        for s in sc:
            s.__post_init__()  # re-validate the replaced fields
            for arm in study["arms"]:
                out.append((value, arm, replace(s, physics=(arm == "physics"))))
    return out


def report_rows(kind, value, extra, report: MetricReport):
    rows = []
    for fam, (l2, h1) in report.by("family").items():
        sel = np.asarray(report.groups["family"]) == fam
        p = {q: float(np.percentile(report.l2[sel], q)) for q in (25, 50, 75)}
        rows.append(
            dict(
                study=kind,
                value=value,
                **extra,
                family=fam,
                mean_L2=l2,
                mean_H1=h1,
                L2_p25=p[25],
                L2_p50=p[50],
                L2_p75=p[75],
                count=int(sel.sum()),
            )
        )
    return rows


SUMMARY_COLUMNS = ("study", "value", "arm", "strategy", "precision", "family", "mean_L2", "mean_H1",
                   "L2_p25", "L2_p50", "L2_p75", "count")


def run_experiment(config, out_dir, progress=None) -> MetricReport:
    """Generate data, train every variant of the study, evaluate and emit CSVs."""
    cfg = validate_config(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
    say = progress or (lambda msg: None)
    fams = cfg["data"]["families"]
    splits = generate_splits(fams, cfg["data"]["counts"], cfg["seed"])
    train_sets = [splits[(ScenarioConfig(families=(f,)).families[0], "train")] for f in fams]
    val_sets = [splits[(ds.family.spec.abbrev, "val")] for ds in train_sets if (ds.family.spec.abbrev, "val") in splits]
    test_sets = [splits[(ds.family.spec.abbrev, "test")] for ds in train_sets]
    net = OperatorNet(cfg["model"])
    ev = cfg["eval"]
    kind = cfg["study"]["kind"]

    def evaluate_all(params, sets):
        reps = [evaluate(net, params, ds, n=ev["n_test"], h1_source=ev["h1_source"]) for ds in sets]
        return MetricReport.concat(reps)

    if kind == "finetune":
        return _run_finetune(cfg, net, train_sets, val_sets, splits, out_dir, say)

    rows, reports, time_rows = [], [], []
    for value, arm, sc in _variants(cfg):
        say(f"{kind} value={value} arm={arm} strategy={sc.strategy}")
        res = train(sc, net, net.init_params(), train_sets, val_sets)
        rep = evaluate_all(res.final_params, test_sets)
        extra = {"arm": arm, "strategy": sc.strategy, "precision": sc.backend.precision}
        rows += report_rows(kind, value, extra, rep)
        n = len(rep.l2)
        rep.groups.update(arm=[arm] * n, value=[fmt(value)] * n)
        reports.append(rep)
        if kind == "partial_time":
            for ds in test_sets:
                curve = error_vs_time(net, res.final_params, ds, n=ev["n_test"])
                last_label = T_GRID[EVEN_T[sc.span - 1]]
                for ti, e in zip(ODD_T, curve):
                    region = "In." if T_GRID[ti] <= last_label else "Ex."
                    time_rows.append(dict(span=value, arm=arm, family=ds.family.spec.abbrev,
                                          t=float(T_GRID[ti]), region=region, L2=float(e)))
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    write_csv(out_dir / STUDY_CSV[kind], SUMMARY_COLUMNS, rows)
    if time_rows:
        write_csv(out_dir / "error_vs_time.csv", ("span", "arm", "family", "t", "region", "L2"), time_rows)
    return MetricReport.concat(reports)


def _run_finetune(cfg, net, train_sets, val_sets, splits, out_dir, say):
    study = cfg["study"]
    base = cfg["training"]
    target = study["target_family"]
    counts = cfg["data"]["counts"]
    say("pretraining")
    pre = train(replace(base, physics=True), net, net.init_params(), train_sets, val_sets)
    tgt_train = generate(target, counts["train"], cfg["seed"] * 7919 + 100, "train")
    tgt_test = generate(target, counts["test"], cfg["seed"] * 7919 + 102, "test")
    iters = int(study["finetune_iterations"])
    sc = replace(base, iterations=iters, T_warmup=max(1, min(base.T_warmup, iters - 1)))
    fams = [ds.family.spec.abbrev for ds in train_sets]
    n_eval = cfg["eval"]["n_test"]
    say("fine-tuning")
    _, traj_ft = finetune_zero_shot(net, pre.final_params, target, sc, tgt_train, fams, tgt_test,
                                    study["eval_every"], n_eval)
    say("from scratch")
    _, traj_sc = finetune_zero_shot(net, net.init_params(), target, sc, tgt_train, fams, tgt_test,
                                    study["eval_every"], n_eval)
    rows = [dict(arm="finetune", iteration=it, L2=l2, H1=h1) for it, l2, h1 in traj_ft]
    rows += [dict(arm="scratch", iteration=it, L2=l2, H1=h1) for it, l2, h1 in traj_sc]
    write_csv(out_dir / "finetune_trajectory.csv", ("arm", "iteration", "L2", "H1"), rows)
    summary = [
        dict(study="finetune", value=target, arm=arm, strategy=sc.strategy, precision=sc.backend.precision,
             family=target, mean_L2=traj[-1][1], mean_H1=traj[-1][2], L2_p25=None, L2_p50=None,
             L2_p75=None, count=n_eval)
        for arm, traj in (("finetune", traj_ft), ("scratch", traj_sc))
    ]
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary)
    write_csv(out_dir / STUDY_CSV["finetune"], SUMMARY_COLUMNS, summary)
    rep = MetricReport(
        np.array([traj_ft[-1][1], traj_sc[-1][1]]),
        np.array([traj_ft[-1][2], traj_sc[-1][2]]),
        {"arm": ["finetune", "scratch"], "family": [target, target]},
    )
    return rep


# ---------------------------------------------------------------------------
# derivative backend benchmark


def bench_batch(families=("Adv", "Diff"), batch=4, points=32, seed=0):
    """A deterministic physics batch and collocation set for backend timing."""
    per = max(1, -(-batch // len(families)))
    u0, exprs = [], []
    for f in families:
        ds = generate(f, per, seed, "test")
        u0 += list(ds.u0)
        exprs += ds.expressions()
    return Batch(np.array(u0[:batch]), exprs[:batch]), sample_collocation("fixed", points, 0, seed)


def bench_backends(net, params, batch, TX, backends, repeats=3):
    """Per-iteration cost and derivative accuracy of each backend config.

    ``wall_time_s`` is the fastest of ``repeats`` full loss-and-gradient
    iterations; ``peak_alloc_bytes`` is the tracemalloc peak of one extra
    iteration. Accuracy is against forward-mode f64 on the same points:
    ``L2_rel_err`` compares the PDE residual fields and ``H1_rel_err`` the
    ``(u, u_t, u_x)`` triple under the H1 norm.
    """
    weights = LossWeights(1.0, 1.0, 1.0, 0.0)
    model = Bound(net, params)
    ctx = model.encode(batch.u0, batch.exprs)
    ref_cfg = DiffBackendConfig("forward_ad")
    R_ref = np.asarray(value_of(compute_pde_loss(model, batch, TX, ref_cfg, ctx)[1]))
    d_ref = derivatives(model, ctx, TX.t, TX.x, {"u_t", "u_x"}, ref_cfg)
    rows = []
    for cfg in backends:
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            loss_and_grad(net, params, batch, weights, TX, cfg)
            ts.append(time.perf_counter() - t0)
        tracemalloc.start()
        try:
            loss_and_grad(net, params, batch, weights, TX, cfg)
            peak = tracemalloc.get_traced_memory()[1]
        finally:
            tracemalloc.stop()
        R = np.asarray(value_of(compute_pde_loss(model, batch, TX, cfg, ctx)[1]))
        d = derivatives(model, ctx, TX.t, TX.x, {"u_t", "u_x"}, cfg)
        v = {k: np.asarray(value_of(a)) for k, a in d.items()}
        vr = {k: np.asarray(value_of(a)) for k, a in d_ref.items()}
        rows.append(
            dict(
                backend=cfg.backend,
                precision=cfg.precision,
                step=cfg.step if cfg.backend == "fdm" else None,
                L2_rel_err=l2_rel(R_ref, R),
                H1_rel_err=h1_rel(vr["u"], v["u"], (vr["u_t"], vr["u_x"]), (v["u_t"], v["u_x"])),
                wall_time_s=min(ts),
                peak_alloc_bytes=int(peak),
            )
        )
    return rows
