import json

import numpy as np
import pytest

from glora import persist
from glora.cli import main
from glora.layer import VECTOR, LayerConfig, lora


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    p = {k: d / v for k, v in {
        "pre": "pre.glra", "shift": "shift.glra", "base": "base.glra", "sup": "sup.glra",
        "cfg": "best.json", "merged": "merged.glra",
    }.items()}
    assert run("gen-data", "--task", "pretrain", "--n", 400, "--dims", "4,2", "--seed", 1, "--out", p["pre"]) == 0
    assert run("gen-data", "--task", "shift", "--shift", "prompt", "--teacher", f"{p['pre']}.teacher.glra",
               "--n", 400, "--seed", 2, "--out", p["shift"]) == 0
    assert run("pretrain", "--data", p["pre"], "--epochs", 30, "--lr", 3e-2, "--out", p["base"],
               "--report", d / "pre.json") == 0
    assert run("train-supernet", "--base", p["base"], "--data", p["shift"], "--epochs", 5, "--batch", 32,
               "--lr", 1e-2, "--ranks", "2,1", "--out", p["sup"], "--report", d / "sup.json") == 0
    assert run("search", "--supernet", p["sup"], "--val", p["shift"], "--generations", 3,
               "--out", p["cfg"], "--report", d / "search.json") == 0
    assert run("merge", "--supernet", p["sup"], "--config", p["cfg"], "--out", p["merged"]) == 0
    p["dir"] = d
    return p


class TestGenData:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-data", "--task", "pretrain", "--seed", 1, "--n", 100, "--dims", "3,2", "--out", tmp_path / name) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        assert (tmp_path / "a.teacher.glra").read_bytes() == (tmp_path / "b.teacher.glra").read_bytes()

    def test_env_seed(self, tmp_path, monkeypatch):
        run("gen-data", "--task", "pretrain", "--seed", 5, "--n", 100, "--dims", "3,2", "--out", tmp_path / "a")
        monkeypatch.setenv("GLORA_SEED", "5")
        run("gen-data", "--task", "pretrain", "--n", 100, "--dims", "3,2", "--out", tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_prompt_sidecar(self, pipeline):
        cfg, prov = persist.load_config(f"{pipeline['shift']}.oracle.json")
        assert cfg == [LayerConfig(c=VECTOR)]
        assert prov["shift"] == "prompt"

    def test_missing_out(self, capsys):
        assert run("gen-data", "--task", "pretrain") == 2

    def test_bad_dims(self, tmp_path):
        assert run("gen-data", "--task", "pretrain", "--dims", "3,x", "--out", tmp_path / "a") == 2
        assert run("gen-data", "--task", "pretrain", "--n", 10, "--dims", "3,2", "--out", tmp_path / "a") == 2

    def test_shift_needs_kind_and_teacher(self, tmp_path):
        assert run("gen-data", "--task", "shift", "--out", tmp_path / "a") == 2
        assert run("gen-data", "--task", "shift", "--shift", "prompt", "--teacher", tmp_path / "none", "--out", tmp_path / "a") == 2


class TestPretrain:
    def test_zero_epochs_is_init(self, pipeline, tmp_path):
        assert run("pretrain", "--data", pipeline["pre"], "--epochs", 0, "--seed", 4, "--out", tmp_path / "a") == 0
        from glora.supernet import build_model

        init = build_model("mlp", [4, 2], 4, dtype=np.float32)
        assert (tmp_path / "a").read_bytes() == persist.model_to_bytes(init)

    def test_loss_decreases_and_deterministic(self, pipeline, tmp_path):
        report = json.loads((pipeline["dir"] / "pre.json").read_text())
        assert report["loss_history"][-1] < report["loss_history"][0]
        assert run("pretrain", "--data", pipeline["pre"], "--epochs", 30, "--lr", 3e-2, "--out", tmp_path / "b") == 0
        assert (tmp_path / "b").read_bytes() == pipeline["base"].read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, pipeline, tmp_path):
        assert run("pretrain", "--data", pipeline["pre"], "--epochs", 5, "--lr", 1e30, "--out", tmp_path / "x") == 3

    def test_corrupt_dataset(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
        assert run("pretrain", "--data", tmp_path / "bad", "--out", tmp_path / "x") == 4


class TestTrainSupernet:
    def test_schedule_defaults_echoed(self, pipeline, tmp_path):
        run("train-supernet", "--base", pipeline["base"], "--data", pipeline["shift"], "--epochs", 0,
            "--out", tmp_path / "s", "--report", tmp_path / "r.json")
        sched = json.loads((tmp_path / "r.json").read_text())["schedule"]
        assert sched["batch"] == 64 and sched["lr"] == 5e-4
        from glora.cli import build_parser

        args = build_parser().parse_args(["train-supernet", "--base", "b", "--data", "d", "--out", "o"])
        assert (args.epochs, args.batch, args.lr) == (500, 64, 5e-4)

    def test_base_preserved(self, pipeline):
        base, _, _ = persist.load_checkpoint(pipeline["base"])
        sup, spaces, _ = persist.load_checkpoint(pipeline["sup"])
        for a, b in zip(base.layers, sup.layers):
            assert np.array_equal(a.W0.data, b.W0.data) and np.array_equal(a.b0.data, b.b0.data)
        assert spaces[0].ranks == (2, 1)

    def test_rank_counting(self, pipeline):
        report = json.loads((pipeline["dir"] / "sup.json").read_text())
        assert report["search_space"]["per_layer"] == [5 * 5 * 4 * 3 * 3]

    def test_small_ranks(self, pipeline, tmp_path):
        run("train-supernet", "--base", pipeline["base"], "--data", pipeline["shift"], "--epochs", 0, "--ranks", "2",
            "--out", tmp_path / "s", "--report", tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())["search_space"]["per_layer"] == [432]

    def test_rank_exceeds_rmax(self, pipeline, tmp_path):
        assert run("train-supernet", "--base", pipeline["base"], "--data", pipeline["shift"],
                   "--ranks", "8", "--r-max", "4", "--out", tmp_path / "s") == 2


class TestSearch:
    def test_defaults(self):
        from glora.cli import build_parser

        a = build_parser().parse_args(["search", "--val", "v", "--out", "o"])
        assert (a.population, a.generations, a.topk, a.pc, a.pm, a.threads) == (50, 20, 10, 0.2, 0.2, 1)

    def test_history_monotone(self, pipeline):
        hist = json.loads((pipeline["dir"] / "search.json").read_text())["history"]
        best = [h["best_fitness"] for h in hist]
        assert len(best) == 4 and best == sorted(best)

    def test_threads_identical(self, pipeline, tmp_path):
        run("search", "--supernet", pipeline["sup"], "--val", pipeline["shift"], "--generations", 3, "--threads", 4,
            "--out", tmp_path / "c.json")
        assert (tmp_path / "c.json").read_bytes() == pipeline["cfg"].read_bytes()

    def test_missing_supernet(self, pipeline, tmp_path):
        assert run("search", "--val", pipeline["shift"], "--out", tmp_path / "c.json") == 2
        assert run("search", "--supernet", tmp_path / "nope", "--val", pipeline["shift"], "--out", tmp_path / "c.json") == 2

    def test_plain_checkpoint_rejected(self, pipeline, tmp_path):
        assert run("search", "--supernet", pipeline["base"], "--val", pipeline["shift"], "--out", tmp_path / "c.json") == 4


class TestMergeEval:
    def test_merge_zero_overhead(self, pipeline):
        header, arrays = persist.decode_container(pipeline["merged"].read_bytes())
        base_header, base_arrays = persist.decode_container(pipeline["base"].read_bytes())
        weights = {k for k in base_arrays if k.endswith((".W", ".b"))}
        assert set(arrays) == weights
        assert all(arrays[k].shape == base_arrays[k].shape for k in weights)

    def test_eval_merged_matches_adapter(self, pipeline, tmp_path):
        run("eval", "--ckpt", pipeline["merged"], "--data", pipeline["shift"], "--report", tmp_path / "m.json")
        run("eval", "--ckpt", pipeline["sup"], "--data", pipeline["shift"], "--config", pipeline["cfg"], "--report", tmp_path / "a.json")
        m = json.loads((tmp_path / "m.json").read_text())["metrics"]
        a = json.loads((tmp_path / "a.json").read_text())["metrics"]
        for split in ("train", "val", "test"):
            assert abs(m[split]["loss"] - a[split]["loss"]) <= 1e-5
            assert "accuracy" not in m[split]

    def test_eval_repeatable(self, pipeline, tmp_path):
        for name in ("x", "y"):
            run("eval", "--ckpt", pipeline["base"], "--data", pipeline["pre"], "--report", tmp_path / name)
        x, y = (json.loads((tmp_path / n).read_text()) for n in ("x", "y"))
        assert x["metrics"] == y["metrics"]

    def test_all_none_merge_is_base(self, pipeline, tmp_path):
        persist.save_config([LayerConfig()], tmp_path / "none.json")
        run("merge", "--supernet", pipeline["sup"], "--config", tmp_path / "none.json", "--out", tmp_path / "m")
        merged, _, _ = persist.load_checkpoint(tmp_path / "m")
        base, _, _ = persist.load_checkpoint(pipeline["base"])
        assert np.array_equal(merged.layers[0].W_uni.data, base.layers[0].W0.data)
        assert np.array_equal(merged.layers[0].b_uni.data, base.layers[0].b0.data)

    def test_layer_mismatch(self, pipeline, tmp_path):
        persist.save_config([LayerConfig(), LayerConfig()], tmp_path / "two.json")
        assert run("merge", "--supernet", pipeline["sup"], "--config", tmp_path / "two.json", "--out", tmp_path / "m") == 4

    def test_dims_mismatch(self, pipeline, tmp_path):
        run("gen-data", "--task", "pretrain", "--n", 100, "--dims", "5,2", "--out", tmp_path / "d")
        assert run("eval", "--ckpt", pipeline["base"], "--data", tmp_path / "d") == 4

    def test_classification_accuracy(self, tmp_path):
        run("gen-data", "--task", "pretrain", "--kind", "classification", "--classes", 3, "--n", 200, "--dims", "4,2", "--out", tmp_path / "d")
        run("pretrain", "--data", tmp_path / "d", "--epochs", 2, "--out", tmp_path / "m")
        run("eval", "--ckpt", tmp_path / "m", "--data", tmp_path / "d", "--report", tmp_path / "r")
        assert 0 <= json.loads((tmp_path / "r").read_text())["metrics"]["val"]["accuracy"] <= 1


class TestReport:
    def _report(self, pipeline, tmp_path, config):
        persist.save_config(config, tmp_path / "c.json")
        code = run("report", "--supernet", pipeline["sup"], "--config", tmp_path / "c.json", "--report", tmp_path / "r.json")
        return code, (json.loads((tmp_path / "r.json").read_text()) if code == 0 else None)

    def test_all_none(self, pipeline, tmp_path):
        _, r = self._report(pipeline, tmp_path, [LayerConfig()])
        assert r["total_params"] == 0 and set(r["params_by_type"].values()) == {0}

    def test_additivity_and_table(self, pipeline, tmp_path):
        _, r = self._report(pipeline, tmp_path, [LayerConfig(a=lora(2), b=lora(1))])
        assert r["total_params"] == sum(r["params_by_type"].values()) == 2 * (4 + 2) + 1 * (4 + 2)
        assert all(len(row["kinds"]) == 5 for row in r["layers"])

    def test_invalid_config(self, pipeline, tmp_path):
        code, _ = self._report(pipeline, tmp_path, [LayerConfig(a=lora(4))])
        assert code == 2
