import json

import numpy as np
import pytest

from vlmoe import cli, harness
from vlmoe.model import MoMEConfig, MoMEModel
from vlmoe.tensor import load_checkpoint

TINY_MODEL = {"D": 16, "heads": 2}


def tiny_spec(tmp_path, **kw):
    base = dict(model=dict(TINY_MODEL), steps=3, seeds=[0], batch=[4, 4, 4], train_scenes=32, val_scenes=8,
                eval_every=2, routing_log_every=2, out=str(tmp_path / "runs"))
    base.update(kw)
    return harness.ExperimentSpec(**base)


class TestSpec:
    @pytest.mark.parametrize(
        "kw",
        [dict(steps=-1), dict(seeds=[]), dict(batch=[1, 2]), dict(axis="depth"), dict(model={"D": 30}),
         dict(axis="strategy", axis_values=["X"]), dict(init_checkpoint="/nonexistent.bin"), dict(eval_every=0)],
    )
    def test_rejected_before_compute(self, tmp_path, kw):
        with pytest.raises(harness.SpecError):
            tiny_spec(tmp_path, **kw).validate()

    def test_bare_model_config_is_accepted(self, tmp_path):
        path = tmp_path / "m.json"
        MoMEConfig(E=8).save(path)
        assert harness.ExperimentSpec.load(path).config_for().E == 8

    def test_axis_cells(self, tmp_path):
        spec = tiny_spec(tmp_path, axis="strategy")
        flags = [(c.scale_T, c.scale_V) for c in map(spec.config_for, spec.cell_values())]
        assert flags == [(False, False), (True, False), (False, True), (True, True)]


class TestTrain:
    def test_zero_steps(self, tmp_path):
        (result,) = harness.cmd_train(tiny_spec(tmp_path, steps=0))
        out = result.out_dir
        assert (out / "metrics.jsonl").read_text() == ""
        assert len((out / "val.jsonl").read_text().splitlines()) == 1
        ck = load_checkpoint(out / "checkpoint.bin")
        fresh = MoMEModel(result.model.config, seed=0)
        for name, t in fresh.params.items():
            np.testing.assert_array_equal(ck[name], t.data)

    def test_byte_identical_reruns(self, tmp_path):
        a = harness.cmd_train(tiny_spec(tmp_path / "a"))[0].out_dir
        b = harness.cmd_train(tiny_spec(tmp_path / "b"))[0].out_dir
        for name in ("metrics.jsonl", "val.jsonl", "routing.jsonl", "checkpoint.bin"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_spec_persisted(self, tmp_path):
        spec = tiny_spec(tmp_path)
        out = harness.cmd_train(spec)[0].out_dir
        assert harness.ExperimentSpec.from_dict(json.loads((out / "spec.json").read_text())) == spec
        assert MoMEConfig.load(out / "config.json") == spec.config_for()

    def test_metrics_rows(self, tmp_path):
        out = harness.cmd_train(tiny_spec(tmp_path))[0].out_dir
        rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2]
        for r in rows:
            assert set(r) == {"step", "loss_total", "loss_mlm", "loss_mim", "loss_vlm", "loss_aux",
                              "drop_rate_by_layer", "wall_ms"}
            assert abs(r["loss_total"] - (r["loss_mlm"] + r["loss_mim"] + r["loss_vlm"] + 0.01 * r["loss_aux"])) <= 1e-10

    def test_expert_sweep_directories(self, tmp_path):
        spec = tiny_spec(tmp_path, axis="experts", axis_values=[1, 4, 8], steps=1)
        results = harness.cmd_train(spec)
        assert sorted(p.name for p in (tmp_path / "runs").iterdir()) == ["experts=1", "experts=4", "experts=8"]
        assert [r.model.config.E for r in results] == [1, 4, 8]

    def test_frozen_finetune(self, tmp_path):
        src = harness.cmd_train(tiny_spec(tmp_path / "pre", steps=2))[0].out_dir / "checkpoint.bin"
        result = harness.cmd_train(tiny_spec(tmp_path / "ft", steps=2, init_checkpoint=str(src), freeze_moe=True))[0]
        before, after = load_checkpoint(src), load_checkpoint(result.out_dir / "checkpoint.bin")
        for name in result.model.moe_param_names():
            np.testing.assert_array_equal(before[name], after[name])
        assert not np.array_equal(before["layers.1.attn.q.w"], after["layers.1.attn.q.w"])


class TestAblate:
    def test_strategy_table(self, tmp_path):
        table = harness.cmd_ablate(tiny_spec(tmp_path, axis="strategy", steps=1))
        assert [r["strategy"] for r in table["rows"]] == ["none", "T", "V", "TV"]
        md = (tmp_path / "runs" / "ablation.md").read_text().splitlines()
        assert len(md) == 2 + 4
        assert json.loads((tmp_path / "runs" / "ablation.json").read_text()) == table

    def test_params_per_token_constant_across_experts(self, tmp_path):
        table = harness.cmd_ablate(tiny_spec(tmp_path, axis="experts", axis_values=[1, 4], steps=1))
        assert len({r["params_per_token_text"] for r in table["rows"]}) == 1
        assert table["rows"][0]["params_total"] < table["rows"][1]["params_total"]

    def test_needs_axis(self, tmp_path):
        with pytest.raises(harness.SpecError):
            harness.cmd_ablate(tiny_spec(tmp_path))


class TestReport:
    @pytest.fixture
    def run_dir(self, tmp_path):
        return harness.cmd_train(tiny_spec(tmp_path))[0].out_dir

    def test_breakdown_conserves_tokens(self, run_dir):
        report = harness.cmd_report(run_dir)
        raw = harness.read_routing_log(run_dir)
        for rec, summary in zip(raw, report["records"]):
            assert sorted(set(rec["token_id"])) == list(range(summary["tokens"]))
            total = sum(sum(kinds.values()) for kinds in summary["kind_breakdown"].values())
            assert total == summary["assignments"] == len(rec["token_id"])
            assert sum(summary["kept"]) + summary["dropped"] == summary["assignments"]

    def test_drop_totals_match_training_metrics(self, run_dir):
        report = harness.cmd_report(run_dir)
        rows = {json.loads(line)["step"]: json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()}
        for s in report["records"]:
            assert s["drop_rate"] == pytest.approx(rows[s["step"]]["drop_rate_by_layer"][f"{s['task']}/{s['modality']}/{s['layer']}"])

    def test_files_written(self, run_dir):
        harness.cmd_report(run_dir)
        names = {p.name for p in (run_dir / "report").iterdir()}
        assert "report.json" in names and any(n.startswith("drop_") for n in names)
        for n in names:
            if n.endswith(".svg"):
                assert (run_dir / "report" / n).read_text().startswith("<svg")

    def test_layers_reported_separately(self, tmp_path):
        spec = tiny_spec(tmp_path, model=dict(TINY_MODEL, L=5, F=1), steps=1)
        report = harness.cmd_report(harness.cmd_train(spec)[0].out_dir)
        assert set(report["drop_profiles"]) == {"text-layer2", "text-layer4", "image-layer2", "image-layer4"}

    def test_missing_logs(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            harness.cmd_report(tmp_path)

    def test_simulate(self, run_dir):
        result = harness.cmd_simulate(run_dir, workers=2)
        assert (run_dir / "simulate_w2.json").exists()
        for row in result["layers"]:
            assert row["metrics"]["load_ratio"] >= 1.0
            assert sum(row["trace"]["compute"]) == sum(map(sum, row["trace"]["dispatch"]))


class TestCli:
    def test_selftest(self, capsys):
        assert cli.main(["selftest"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_train_report_simulate(self, tmp_path, capsys):
        cfg = tmp_path / "spec.json"
        cfg.write_text(json.dumps(tiny_spec(tmp_path).to_dict()))
        out = tmp_path / "cli"
        assert cli.main(["train", "--config", str(cfg), "--seed", "3", "--steps", "2", "--out", str(out)]) == 0
        run = out / "seed_3"
        assert len((run / "metrics.jsonl").read_text().splitlines()) == 2
        assert cli.main(["report", str(run)]) == 0
        assert cli.main(["simulate", str(run), "--workers", "4"]) == 0
        assert "load ratio" in capsys.readouterr().out

    def test_ablate(self, tmp_path, capsys):
        cfg = tmp_path / "spec.json"
        cfg.write_text(json.dumps(tiny_spec(tmp_path, steps=1).to_dict()))
        assert cli.main(["ablate", "--config", str(cfg), "--axis", "bpr", "--out", str(tmp_path / "abl")]) == 0
        assert capsys.readouterr().out.count("\n") == 4

    def test_bad_spec_exit_code(self, tmp_path):
        cfg = tmp_path / "spec.json"
        cfg.write_text(json.dumps({"steps": -5}))
        assert cli.main(["train", "--config", str(cfg)]) == 2

    def test_missing_run_exit_code(self, tmp_path):
        assert cli.main(["report", str(tmp_path / "nope")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_exit_code(self, tmp_path):
        cfg = tmp_path / "spec.json"
        cfg.write_text(json.dumps(tiny_spec(tmp_path, lr=1e300, steps=4).to_dict()))
        assert cli.main(["train", "--config", str(cfg)]) == 3
        assert (tmp_path / "runs" / "seed_0" / "diagnostics.json").exists()
