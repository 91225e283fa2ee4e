import csv
import dataclasses
import json

import pytest

from conftest import small_config
from featforge import pipeline as P
from featforge.cli import MANIFEST, main
from featforge.config import ExperimentConfig


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(small_config().to_json())
    return str(p)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "cfg.json"
    cfg.write_text(small_config().to_json())
    assert main(["run", "--config", str(cfg), "--out", str(root / "r"), "--seed", "1",
                 "--variants", "plain", "full", "fixed"]) == 0
    return root / "r"


def manifest(d):
    return json.loads((d / MANIFEST).read_text())


class TestRun:
    def test_artifacts(self, run_dir):
        names = {p.name for p in run_dir.iterdir()}
        assert {"teacher.ckpt", "stats.bin", "fisher.ckpt", "generator.ckpt", "generator_curves.csv",
                "student_full.ckpt", "report_plain.json", "report_fixed.json", MANIFEST} <= names

    def test_manifest(self, run_dir):
        m = manifest(run_dir)
        seeded = small_config().replace(task=dataclasses.replace(small_config().task, seed=1))
        assert m["seeds"] == [1] and m["config_digest"] == seeded.digest()
        assert {"base_train", "train_generator", "finetune:full", "evaluate:plain"} <= set(m["stages"])
        assert m["stages"]["finetune:full"]["forged_per_class"] == [125, 125, 125]
        assert "forged_per_class" in m["stages"]["finetune:plain"]

    def test_reports(self, run_dir):
        r = P.EvalReport.from_dict(json.loads((run_dir / "report_full.json").read_text()))
        assert r.check_overall() and r.num_base == 3 and r.num_novel == 2

    def test_stage_by_stage_matches_run(self, run_dir, cfg_file, tmp_path):
        out = str(tmp_path / "s")
        assert main(["base-train", "--config", cfg_file, "--out", out, "--seed", "1"]) == 0
        assert main(["train-generator", "--out", out]) == 0
        assert main(["finetune", "--out", out, "--variant", "full"]) == 0
        assert main(["evaluate", "--out", out, "--variant", "full"]) == 0
        for name in ("stats.bin", "teacher.ckpt", "generator.ckpt", "student_full.ckpt", "report_full.json"):
            assert (tmp_path / "s" / name).read_bytes() == (run_dir / name).read_bytes()

    def test_dump_features(self, run_dir):
        assert main(["dump-features", "--out", str(run_dir), "--per-class", "3"]) == 0
        rows = list(csv.reader(open(run_dir / "features.csv")))
        assert rows[0][:2] == ["source", "label"] and len(rows) == 1 + 9 + 9


class TestErrors:
    def test_unknown_key(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"finetune": {"lamda_f": 0.1}}))
        assert main(["base-train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        assert "finetune.lamda_f" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["base-train", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2

    def test_stage_without_manifest(self, tmp_path):
        assert main(["train-generator", "--out", str(tmp_path)]) == 4

    def test_stage_order(self, cfg_file, tmp_path, capsys):
        out = str(tmp_path / "o")
        assert main(["base-train", "--config", cfg_file, "--out", out]) == 0
        assert main(["finetune", "--out", out, "--variant", "full"]) == 4
        assert "train_generator" in capsys.readouterr().err
        assert main(["finetune", "--out", out, "--variant", "plain"]) == 0

    def test_tampered_artifact(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["base-train", "--config", cfg_file, "--out", str(out)]) == 0
        raw = bytearray((out / "stats.bin").read_bytes())
        raw[-1] ^= 1
        (out / "stats.bin").write_bytes(bytes(raw))
        assert main(["train-generator", "--out", str(out)]) == 4
        assert "sha256" in capsys.readouterr().err

    def test_deleted_artifact(self, cfg_file, tmp_path):
        out = tmp_path / "o"
        assert main(["base-train", "--config", cfg_file, "--out", str(out)]) == 0
        (out / "teacher.ckpt").unlink()
        assert main(["train-generator", "--out", str(out)]) == 4

    def test_config_mismatch(self, cfg_file, tmp_path):
        out = str(tmp_path / "o")
        assert main(["base-train", "--config", cfg_file, "--out", out]) == 0
        assert main(["train-generator", "--out", out, "--seed", "9"]) == 4

    def test_training_failure(self, tmp_path):
        cfg = small_config().to_dict()
        cfg["base"]["epochs"] = 1
        cfg["base"]["accuracy_bar"] = 1.0
        cfg["task"]["separation"] = 0.0
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["base-train", "--config", str(p), "--out", str(tmp_path / "o")]) == 3


def test_base_train_rerun_identical(cfg_file, tmp_path):
    for d in ("a", "b"):
        assert main(["base-train", "--config", cfg_file, "--out", str(tmp_path / d), "--seed", "2"]) == 0
    for name in ("stats.bin", "teacher.ckpt", "fisher.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_data_free(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert main(["base-train", "--config", cfg_file, "--out", str(out), "--data-free"]) == 0
    assert not (out / "data" / "base_train.npz").exists()
    assert "base_train" not in manifest(out)["stages"]["base_train"]["artifacts"]
    mark = len(P.READ_LOG)
    assert main(["train-generator", "--out", str(out)]) == 0
    assert main(["finetune", "--out", str(out), "--variant", "full"]) == 0
    assert all("base" not in p for p in P.READ_LOG[mark:])


def test_ablate(cfg_file, tmp_path):
    assert main(["ablate", "--config", cfg_file, "--out", str(tmp_path), "--seed", "0"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation_seed0.csv")))
    assert len(rows) == 8
    assert {(r["conf"], r["feat_distill"], r["reg_l1"]) for r in rows} == {
        (a, b, c) for a in "01" for b in "01" for c in "01"}
    assert all(0 <= float(r["base_acc"]) <= 1 for r in rows)


def test_default_config_loads(capsys, tmp_path):
    assert main(["default-config"]) == 0
    p = tmp_path / "d.json"
    p.write_text(capsys.readouterr().out)
    from featforge.config import load_config
    assert load_config(p).digest() == ExperimentConfig().digest()


def test_unknown_scale(tmp_path):
    with pytest.raises(SystemExit):
        main(["base-train", "--out", str(tmp_path), "--scale", "huge"])
