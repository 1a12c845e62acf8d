"""Command-line entry point: ``physop <subcommand> ...``.

Exit status is 0 on success, 1 with a one-line diagnostic on stderr when a
command fails, and 2 for usage errors (unknown flags, missing arguments).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from physop.datagen import SolverDiverged, generate, generate_splits, read_dataset, write_dataset
from physop.errors import ConfigError
from physop.experiments import (
    BENCH_COLUMNS,
    SUMMARY_COLUMNS,
    bench_backends,
    bench_batch,
    config_to_dict,
    report_rows,
    run_experiment,
    validate_config,
    write_csv,
)
from physop.losses import BACKENDS, PRECISION_ALIASES, DiffBackendConfig
from physop.metrics import MetricReport, evaluate
from physop.model import OperatorNet, load_checkpoint
from physop.symbolic import Family, UnknownFamily
from physop.training import finetune_zero_shot, train, tune_allocator


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _name_list(choices):
    def parse(text):
        names = [v for v in text.split(",") if v]
        bad = [v for v in names if v not in choices]
        if bad or not names:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(choices)}; got {text!r}")
        return names

    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="physop", description="Physics-informed operator learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="solve one PDE family and write a dataset file")
    g.add_argument("--family", required=True, help="family abbreviation or name, e.g. Adv, Burgers, Diff-Lin")
    g.add_argument("--count", required=True, type=int, help="number of instances")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.add_argument("--split", default="train", choices=("train", "val", "test"), help="split tag recorded in the manifest")
    g.add_argument("--out", required=True, help="output .bin path; the manifest goes to <out>.json")

    t = sub.add_parser("train", help="train one model from a JSON config")
    t.add_argument("--config", required=True, help="experiment config (JSON)")
    t.add_argument("--out", required=True, help="output directory for model.ckpt, log.ndjson and metrics.csv")

    e = sub.add_parser("eval", help="evaluate a checkpoint on dataset files")
    e.add_argument("--checkpoint", required=True, help="model checkpoint")
    e.add_argument("--dataset", required=True, nargs="+", help="one or more dataset .bin files")
    e.add_argument("--metrics-out", required=True, help="CSV of per-family L2/H1 summaries")
    e.add_argument("--n", type=int, default=None, help="evaluate only the first N instances per file")
    e.add_argument("--h1-source", default="grid", choices=("grid", "forward_ad"), help="prediction derivatives for H1")

    f = sub.add_parser("finetune", help="physics-only fine-tuning of a checkpoint on an unseen family")
    f.add_argument("--checkpoint", required=True, help="pretrained checkpoint")
    f.add_argument("--family", required=True, help="target family (must not be a pretraining family)")
    f.add_argument("--config", required=True, help="config whose training section sets the fine-tuning run")
    f.add_argument("--out", required=True, help="output directory for the trajectory CSV and checkpoint")
    f.add_argument("--eval-every", type=int, default=100, help="iterations between test evaluations")

    b = sub.add_parser("bench-diff", help="time and compare derivative backends")
    b.add_argument("--checkpoint", required=True, help="model checkpoint")
    b.add_argument("--backends", type=_name_list(BACKENDS), default=list(BACKENDS),
                   help=f"comma-separated subset of {','.join(BACKENDS)}")
    b.add_argument("--steps", type=_float_list, default=[1e-3], help="comma-separated FDM steps")
    b.add_argument("--precisions", type=_name_list(tuple(PRECISION_ALIASES)), default=["f32"],
                   help=f"comma-separated FDM precisions from {','.join(PRECISION_ALIASES)}")
    b.add_argument("--families", type=lambda s: [v for v in s.split(",") if v], default=["Adv", "Diff"],
                   help="families supplying the benchmark batch")
    b.add_argument("--batch", type=int, default=2, help="instances per batch")
    b.add_argument("--points", type=int, default=8, help="collocation points per instance")
    b.add_argument("--repeats", type=int, default=3, help="timed repetitions; the fastest is reported")
    b.add_argument("--seed", type=int, default=0, help="seed for the batch and collocation points")
    b.add_argument("--out", required=True, help="output CSV")

    r = sub.add_parser("run", help="run a full study from a config (data, training, evaluation, CSVs)")
    r.add_argument("--config", required=True, help="experiment config (JSON)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return p


NO_ARM = {"arm": None, "strategy": None, "precision": None}


def _say(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(a):
    if a.count < 1:
        raise ConfigError("--count must be positive")
    ds = generate(Family.lookup(a.family), a.count, a.seed, a.split)
    path = write_dataset(ds, a.out)
    print(f"wrote {len(ds)} {ds.family.spec.abbrev} instances to {path}")


def cmd_train(a):
    cfg = validate_config(a.config)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
    splits = generate_splits(cfg["data"]["families"], cfg["data"]["counts"], cfg["seed"])
    sc = cfg["training"]
    pick = lambda split: [splits[(f, split)] for f in sc.families if (f, split) in splits]
    net = OperatorNet(cfg["model"])
    res = train(sc, net, net.init_params(), pick("train"), pick("val"), out / "log.ndjson", out / "model.ckpt")
    ev = cfg["eval"]
    reps = [evaluate(net, res.params, ds, n=ev["n_test"], h1_source=ev["h1_source"]) for ds in pick("test")]
    if reps:
        write_csv(out / "metrics.csv", SUMMARY_COLUMNS, report_rows("train", None, NO_ARM, MetricReport.concat(reps)))
    print(f"best validation L2 {res.best_val:.6g} at iteration {res.best_iteration}; outputs in {out}")


def cmd_eval(a):
    params, _ = load_checkpoint(a.checkpoint)
    net = OperatorNet(params.cfg)
    reps = [evaluate(net, params, read_dataset(p), n=a.n, h1_source=a.h1_source) for p in a.dataset]
    rep = MetricReport.concat(reps)
    write_csv(a.metrics_out, SUMMARY_COLUMNS, report_rows("eval", None, NO_ARM, rep))
    s = rep.summary()
    print(f"{s['count']} instances: mean L2 {s['mean_L2']:.6g}, mean H1 {s['mean_H1']:.6g}")


def cmd_finetune(a):
    cfg = validate_config(a.config)
    params, header = load_checkpoint(a.checkpoint)
    net = OperatorNet(params.cfg)
    target = Family.lookup(a.family)
    counts = cfg["data"]["counts"]
    seed = cfg["seed"] * 7919 + 100
    tgt_train = generate(target, counts["train"], seed, "train")
    tgt_test = generate(target, counts["test"], seed + 2, "test") if counts["test"] else None
    scenario = header.get("extra", {}).get("scenario") or {}
    pre_fams = scenario.get("families") or cfg["data"]["families"]
    out = Path(a.out)
    res, traj = finetune_zero_shot(net, params, target, cfg["training"], tgt_train, pre_fams, tgt_test,
                                   a.eval_every, cfg["eval"]["n_test"], out / "log.ndjson", out / "model.ckpt")
    rows = [dict(iteration=it, L2=l2, H1=h1) for it, l2, h1 in traj]
    write_csv(out / "finetune_trajectory.csv", ("iteration", "L2", "H1"), rows)
    if traj:
        print(f"test L2 {traj[0][1]:.6g} at iteration 0 -> {traj[-1][1]:.6g} at iteration {traj[-1][0]}")


def cmd_bench_diff(a):
    params, _ = load_checkpoint(a.checkpoint)
    net = OperatorNet(params.cfg)
    configs = []
    for name in a.backends:
        if name == "fdm":
            configs += [DiffBackendConfig("fdm", s, p) for p in a.precisions for s in a.steps]
        else:
            configs.append(DiffBackendConfig(name))
    batch, TX = bench_batch(a.families, a.batch, a.points, a.seed)
    rows = bench_backends(net, params, batch, TX, configs, a.repeats)
    write_csv(a.out, BENCH_COLUMNS, rows)
    for r in rows:
        step = "" if r["step"] is None else f" step={r['step']:g}"
        print(f"{r['backend']:<10} {r['precision']}{step}: {r['wall_time_s']:.4f} s, L2 err {r['L2_rel_err']:.3g}")


def cmd_run(a):
    rep = run_experiment(a.config, a.out, None if a.quiet else _say)
    s = rep.summary()
    print(f"{s['count']} evaluations: mean L2 {s['mean_L2']:.6g}; CSVs in {a.out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "bench-diff": cmd_bench_diff,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    try:
        COMMANDS[args.command](args)
    except (ConfigError, UnknownFamily, SolverDiverged, OSError, ValueError) as exc:
        print(f"physop {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
