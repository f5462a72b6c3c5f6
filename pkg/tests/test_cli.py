import json
import os

import numpy as np
import pytest

from costconv import cli
from costconv import data as D
from costconv.serialization import file_sha256

TWO_CLASSES = {"clips_per_class": 4, "val_clips_per_class": 2,
               "classes": [{"kind": "appearance", "shape": "circle", "trajectory": "static"},
                           {"kind": "motion", "shape": "square", "trajectory": "left"}],
               "t": 4, "h": 8, "w": 8, "object_size": 4, "speed": 1}
TINY_TRAIN = {"stem_channels": 4, "stem_pool": False, "blocks": [[2, 2, 8, 1], [2, 4, 8, 2]],
              "total_steps": 4, "batch_size": 4, "eval_every": 2, "lr": 0.05}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def outputs(out_dir):
    with open(os.path.join(out_dir, "run_manifest.json")) as fh:
        return {o["path"]: o["sha256"] for o in json.load(fh)["outputs"]}


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["gen", "--spec", write_json(tmp_path / "spec.json", TWO_CLASSES), "--out", str(out)]) == 0
    return str(out)


@pytest.fixture
def trained(tmp_path, dataset):
    out = tmp_path / "run"
    cfg = write_json(tmp_path / "cfg.json", TINY_TRAIN)
    assert cli.main(["train", "--config", cfg, "--data", dataset, "--out", str(out)]) == 0
    return str(out)


class TestManifest:
    def test_lists_every_output_with_hash(self, trained):
        listed = outputs(trained)
        on_disk = {os.path.relpath(os.path.join(r, n), trained)
                   for r, _, names in os.walk(trained) for n in names} - {"run_manifest.json"}
        assert set(listed) == on_disk
        assert all(file_sha256(os.path.join(trained, p)) == h for p, h in listed.items())
        with open(os.path.join(trained, "run_manifest.json")) as fh:
            m = json.load(fh)
        assert m["seed"] == 0 and len(m["config_sha256"]) == 64
        assert set(m["versions"]) == {"costconv", "python", "numpy", "scipy"}
        assert m["started"] <= m["finished"]

    def test_canonical_hash_ignores_key_order(self):
        assert cli.canonical_sha256({"a": 1, "b": [1, 2]}) == cli.canonical_sha256({"b": [1, 2], "a": 1})


class TestGen:
    def test_counts(self, dataset):
        files = outputs(dataset)
        assert sum(p.startswith("clips") for p in files) == 2 * (4 + 2)
        _, splits = D.read_dataset(dataset)
        assert len(splits["train"]) == 8 and len(splits["val"]) == 4

    def test_default_spec(self, tmp_path):
        assert cli.main(["gen", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "manifest.csv") as fh:
            rows = fh.read().splitlines()[1:]
        assert len(rows) == 8 * 250
        assert sum(p.startswith("clips") for p in outputs(tmp_path)) == 8 * 250

    def test_empty_spec(self, tmp_path):
        spec = write_json(tmp_path / "s.json", {"classes": []})
        assert cli.main(["gen", "--spec", spec, "--out", str(tmp_path / "d")]) == 0
        assert os.listdir(tmp_path / "d" / "clips") == []

    def test_rerun_identical_hashes(self, tmp_path, dataset):
        spec = write_json(tmp_path / "spec2.json", TWO_CLASSES)
        assert cli.main(["gen", "--spec", spec, "--out", str(tmp_path / "again")]) == 0
        assert outputs(dataset) == outputs(tmp_path / "again")

    def test_bad_spec(self, tmp_path):
        spec = write_json(tmp_path / "s.json", {"frames": 3})
        assert cli.main(["gen", "--spec", spec, "--out", str(tmp_path / "d")]) == 2
        (tmp_path / "broken.json").write_text("{not json")
        assert cli.main(["gen", "--spec", str(tmp_path / "broken.json"), "--out", str(tmp_path / "d")]) == 2

    def test_missing_spec_file(self, tmp_path):
        assert cli.main(["gen", "--spec", str(tmp_path / "none.json"), "--out", str(tmp_path / "d")]) == 3


class TestTrain:
    def test_outputs(self, trained):
        files = outputs(trained)
        assert {"metrics.csv", "metrics.jsonl", "config.json", "best/manifest.json", "last/manifest.json"} <= set(files)
        lines = open(os.path.join(trained, "metrics.csv")).read().splitlines()
        assert lines[0].startswith("step,train_loss,val_top1") and len(lines) == 3

    def test_rerun_identical_hashes(self, tmp_path, dataset, trained):
        cfg = write_json(tmp_path / "cfg2.json", TINY_TRAIN)
        assert cli.main(["train", "--config", cfg, "--data", dataset, "--out", str(tmp_path / "again")]) == 0
        assert outputs(trained) == outputs(tmp_path / "again")

    def test_unit_and_no_share_flags(self, tmp_path, dataset):
        cfg = write_json(tmp_path / "cfg.json", TINY_TRAIN)
        out = tmp_path / "ns"
        assert cli.main(["train", "--config", cfg, "--data", dataset, "--out", str(out),
                         "--unit", "cost-a", "--no-share", "--seed", "3"]) == 0
        resolved = json.loads((out / "config.json").read_text())
        assert resolved["network"]["unit_kind"] == "cost-a"
        assert resolved["network"]["share_weights"] is False
        assert resolved["network"]["seed"] == resolved["train"]["seed"] == 3

    def test_missing_data(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3

    def test_unknown_key(self, tmp_path, dataset):
        cfg = write_json(tmp_path / "cfg.json", {"epochs": 3})
        assert cli.main(["train", "--config", cfg, "--data", dataset, "--out", str(tmp_path / "o")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self, tmp_path, dataset):
        cfg = write_json(tmp_path / "cfg.json", {**TINY_TRAIN, "lr": 1e30, "total_steps": 6})
        out = tmp_path / "o"
        assert cli.main(["train", "--config", cfg, "--data", dataset, "--out", str(out)]) == 4
        assert (out / "metrics.csv").exists()


class TestGradcheck:
    def test_op_scope_passes(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--scope", "op", "--out", str(tmp_path)]) == 0
        text = capsys.readouterr().out
        for name in ("conv_three_views", "fuse_views", "cost_a", "cost_b", "batch_norm"):
            assert f"PASS {name}:" in text
        assert len(json.loads((tmp_path / "gradcheck.json").read_text())) == 11

    def test_unit_scope_covers_all_units(self, tmp_path):
        assert cli.main(["gradcheck", "--scope", "unit", "--out", str(tmp_path)]) == 0
        names = [r["name"] for r in json.loads((tmp_path / "gradcheck.json").read_text())]
        assert names == [f"unit:{c}" for c in ("c2d", "c3d311", "c3d333", "cost-a", "cost-b", "cost-b-noshare")]

    def test_corrupted_gradient_fails(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--scope", "op", "--corrupt", "cost_b", "--out", str(tmp_path)]) == 5
        assert "FAIL cost_b:" in capsys.readouterr().out


class TestFlops:
    def test_default_network_and_sweep(self, tmp_path):
        assert cli.main(["flops", "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "op_cost.json").read_text())
        assert (rep["params"], rep["multiply_adds_naive"], rep["multiply_adds_optimized"]) == (58260, 5063680, 4539392)
        sweep = {r["k"]: r for r in json.loads((tmp_path / "k_sweep.json").read_text())}
        assert (sweep[3]["cost_naive"], sweep[3]["cost_opt"], sweep[3]["c3d"]) == (27, 19, 27)
        assert (sweep[5]["cost_naive"], sweep[5]["cost_opt"], sweep[5]["c3d"]) == (75, 61, 125)
        assert (sweep[7]["cost_opt"], sweep[7]["c3d"]) == (127, 343)
        assert (tmp_path / "k_sweep.csv").read_text().startswith("k,")

    def test_bad_config(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"unit_kind": "p3d"})
        assert cli.main(["flops", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestAnalyze:
    def test_zero_init_checkpoint_is_uniform(self, tmp_path, dataset):
        cfg = write_json(tmp_path / "cfg.json", {**TINY_TRAIN, "lr": 0.0})
        assert cli.main(["train", "--config", cfg, "--data", dataset, "--out", str(tmp_path / "r")]) == 0
        out = tmp_path / "an"
        assert cli.main(["analyze", "--checkpoint", str(tmp_path / "r" / "last"), "--data", dataset,
                         "--out", str(out)]) == 0
        prof = json.loads((out / "coefficient_profile.json").read_text())
        for row in prof["per_layer"]:
            np.testing.assert_allclose([row["hw"], row["tw"], row["th"]], [1 / 3] * 3, rtol=0, atol=1e-15)
        assert {"class_ranking.csv", "class_ranking.json", "coefficient_profile_plot.csv"} <= set(outputs(out))

    def test_missing_checkpoint(self, tmp_path, dataset):
        assert cli.main(["analyze", "--checkpoint", str(tmp_path / "nope"), "--data", dataset,
                         "--out", str(tmp_path / "o")]) == 3

    def test_no_cost_layers(self, tmp_path, dataset):
        cfg = write_json(tmp_path / "cfg.json", {**TINY_TRAIN, "unit_kind": "c2d", "total_steps": 1})
        assert cli.main(["train", "--config", cfg, "--data", dataset, "--out", str(tmp_path / "r")]) == 0
        assert cli.main(["analyze", "--checkpoint", str(tmp_path / "r" / "last"), "--data", dataset,
                         "--out", str(tmp_path / "o")]) == 2


class TestOracle:
    def test_masked_c3d(self, tmp_path):
        assert cli.main(["oracle", "--which", "masked-c3d", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "oracle.json").read_text())
        assert res["passed"] and res["max_abs_diff"] <= 1e-10

    def test_receptive_field(self, tmp_path, capsys):
        assert cli.main(["oracle", "--which", "receptive-field", "--k", "3", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "oracle.json").read_text())
        assert (res["cost"], res["c3d333"]) == (19, 27)
        assert capsys.readouterr().out.startswith("PASS")

    def test_conv(self, tmp_path):
        assert cli.main(["oracle", "--which", "conv", "--out", str(tmp_path)]) == 0

    def test_even_k_rejected(self, tmp_path):
        assert cli.main(["oracle", "--which", "conv", "--k", "4", "--out", str(tmp_path)]) == 2

    def test_failure_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setitem(cli.V.ORACLES, "conv", lambda k, seed: {"oracle": "conv", "passed": False})
        assert cli.main(["oracle", "--which", "conv", "--out", str(tmp_path)]) == 5


class TestEnvironment:
    def test_thread_cap(self, tmp_path, monkeypatch):
        monkeypatch.setenv("COST_THREADS", "1")
        assert cli.main(["oracle", "--which", "receptive-field", "--out", str(tmp_path)]) == 0
        monkeypatch.setenv("COST_THREADS", "zero")
        assert cli.main(["oracle", "--which", "receptive-field", "--out", str(tmp_path)]) == 2

    def test_argparse_errors_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["oracle", "--which", "nonsense"])
        assert exc.value.code == 2
