import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from physop.errors import ConfigError
from physop.experiments import (
    BENCH_COLUMNS,
    SUMMARY_COLUMNS,
    bench_backends,
    bench_batch,
    fmt,
    run_experiment,
    validate_config,
    write_csv,
)
from physop.losses import DiffBackendConfig
from physop.model import ModelConfig, OperatorNet

TINY_MODEL = {"embed_dim": 8, "heads": 2, "patch": 32, "data_layers": 1, "symbol_layers": 1,
              "fusion_layers": 1, "decoder_layers": 1, "k_per": 2}
TINY_TRAIN = {"iterations": 3, "T_warmup": 1, "batch_size": 2, "data_batch_size": 2,
              "collocation": 8, "val_every": 2, "val_size": 2}


def tiny_config(**study):
    return {"version": 1, "name": "tiny", "seed": 3,
            "data": {"counts": {"train": 3, "val": 2, "test": 2}},
            "model": TINY_MODEL, "training": TINY_TRAIN, "study": study, "eval": {"n_test": 2}}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestFormatting:
    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_float_round_trip(self, v):
        assert float(fmt(v)) == v

    def test_cells(self):
        assert fmt(None) == ""
        assert fmt((4, 16)) == "4x16"
        assert fmt(np.float32(0.5)) == "0.5"
        assert fmt("Adv") == "Adv"

    def test_write_csv_dicts_and_tuples(self, tmp_path):
        p = write_csv(tmp_path / "sub" / "a.csv", ("a", "b"), [{"a": 1, "b": 0.1}, (2, None)])
        assert p.read_text() == "a,b\n1,0.10000000000000001\n2,\n"


class TestValidation:
    def test_defaults(self):
        cfg = validate_config({})
        assert cfg["data"]["families"] == ["Adv", "Diff"]
        assert cfg["data"]["counts"] == {"train": 200, "val": 50, "test": 100}
        assert cfg["study"]["kind"] == "single"
        assert cfg["model"].embed_dim == 32

    @pytest.mark.parametrize(
        "cfg, path",
        [
            ({"bogus": 1}, "$.bogus"),
            ({"version": 7}, "$.version"),
            ({"seed": "x"}, "$.seed"),
            ({"data": {"counts": {"train": -1}}}, "$.data.counts.train"),
            ({"data": {"counts": {"extra": 1}}}, "$.data.counts.extra"),
            ({"model": {"embed_dim": 8, "heads": 3}}, "$.model"),
            ({"model": {"width": 8}}, "$.model.width"),
            ({"training": {"lr": 1}}, "$.training.lr"),
            ({"training": {"scenario": "everything"}}, "$.training"),
            ({"study": {"kind": "ablation"}}, "$.study.kind"),
            ({"study": {"arms": ["physics", "both"]}}, "$.study.arms[1]"),
            ({"study": {"kind": "finetune"}}, "$.study.target_family"),
            ({"eval": {"h1_source": "spectral"}}, "$.eval.h1_source"),
            ({"training": {"families": ["Adv"]}}, "$.training.families"),
        ],
    )
    def test_error_names_path(self, cfg, path):
        with pytest.raises(ConfigError) as info:
            validate_config(cfg)
        assert str(info.value).startswith(path)

    def test_invalid_json_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError):
            validate_config(p)


class TestRunExperiment:
    def test_byte_identical_reruns(self, tmp_path):
        cfg = tiny_config(kind="partial_time", values=[2], arms=["physics", "data_only"])
        run_experiment(cfg, tmp_path / "a")
        rep = run_experiment(cfg, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["config.json", "error_vs_span.csv", "error_vs_time.csv", "summary.csv"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        rows = read_rows(tmp_path / "a" / "summary.csv")
        assert list(rows[0]) == list(SUMMARY_COLUMNS)
        assert {(r["arm"], r["family"]) for r in rows} == {
            (a, f) for a in ("physics", "data_only") for f in ("Adv", "Diff")
        }
        assert len(rep.l2) == 8
        regions = {r["region"] for r in read_rows(tmp_path / "a" / "error_vs_time.csv")}
        assert regions == {"In.", "Ex."}

    def test_collocation_strategies(self, tmp_path):
        cfg = tiny_config(kind="collocation", values=[4], strategies=["resample", "fixed"])
        run_experiment(cfg, tmp_path)
        rows = read_rows(tmp_path / "error_vs_collocation.csv")
        assert {r["strategy"] for r in rows} == {"resample", "fixed"}
        assert all(r["value"] == "4" for r in rows)

    def test_finetune_trajectories(self, tmp_path):
        cfg = tiny_config(kind="finetune", target_family="Diff-Lin", finetune_iterations=3, eval_every=2)
        rep = run_experiment(cfg, tmp_path)
        traj = read_rows(tmp_path / "finetune_trajectory.csv")
        assert [(r["arm"], r["iteration"]) for r in traj] == [
            ("finetune", "0"), ("finetune", "2"), ("finetune", "3"),
            ("scratch", "0"), ("scratch", "2"), ("scratch", "3"),
        ]
        assert rep.groups["arm"] == ["finetune", "scratch"]
        saved = json.loads((tmp_path / "config.json").read_text())
        assert saved["study"]["target_family"] == "Diff-Lin"


class TestBench:
    def test_rows_and_reference(self):
        net = OperatorNet(ModelConfig(**TINY_MODEL))
        params = net.init_params()
        batch, TX = bench_batch(("Adv", "Diff"), 2, 6, seed=1)
        cfgs = [DiffBackendConfig("forward_ad"), DiffBackendConfig("reverse_ad"),
                DiffBackendConfig("fdm", 1e-4, "f64"), DiffBackendConfig("fdm", 1e-4, "f32")]
        rows = bench_backends(net, params, batch, TX, cfgs, repeats=1)
        assert [list(r) for r in rows] == [list(BENCH_COLUMNS)] * 4
        assert rows[0]["L2_rel_err"] == 0.0 and rows[0]["H1_rel_err"] == 0.0
        # reverse mode computes the same derivatives
        assert rows[1]["L2_rel_err"] < 1e-10
        # f64 differences are accurate, f32 rounding swamps them at this step
        assert rows[2]["L2_rel_err"] < 1e-4
        assert rows[3]["L2_rel_err"] > 100 * rows[2]["L2_rel_err"]
        assert rows[0]["step"] is None and rows[2]["step"] == 1e-4
        assert all(r["wall_time_s"] > 0 and r["peak_alloc_bytes"] > 0 for r in rows)
