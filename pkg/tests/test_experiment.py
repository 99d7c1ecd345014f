import csv
import json
import shutil

import pytest

from polybench import cli
from polybench import experiment as ex
from polybench.dataset import load_foldplan, load_manifest

TINY = """\
[experiment]
folds = 0
output_dir = {out}
cache_dir = {out}/cache

[resnet_scratch]
max_epochs = 1
image_size = 32

[resnet_pretrained]
max_epochs = 1
image_size = 32
weights = {weights}
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_proxy_weights):
    out = tmp_path_factory.mktemp("runs")
    path = out / "tiny.ini"
    path.write_text(TINY.format(out=out, weights=tiny_proxy_weights))
    assert cli.main(["repro-paper", "--config", str(path)]) == 0
    cfg = ex.load_config(path)
    return cfg, path, ex.locate_run_dir(cfg, create=False)


def test_defaults_follow_protocol():
    cfg = ex.ExperimentConfig()
    assert cfg.c_grid == (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
    assert cfg.folds == tuple(range(12))
    assert cfg.classifiers == ("svm", "resnet_scratch", "resnet_pretrained")
    s, p = cfg.cnn_config("resnet_scratch", 0), cfg.cnn_config("resnet_pretrained", 0)
    assert (s.learning_rate, s.max_epochs, s.image_size) == (0.001, 50, 224)
    assert (p.learning_rate, p.max_epochs, p.image_size) == (0.0001, 20, 224)
    assert cfg.kernel_config().degree == 3 and cfg.fold_mode == "grouped"


def test_quick_profile():
    cfg = ex.load_config(None, {("experiment", "profile"): "quick"})
    assert cfg.folds == (0, 3, 7)
    assert cfg.cnn_config("resnet_pretrained", 0).image_size == 64
    assert cfg.cnn_config("resnet_pretrained", 0).max_epochs == 20
    assert cfg.digest() != ex.ExperimentConfig().digest()


def test_dump_defaults_round_trips(tmp_path, capsys):
    assert cli.main(["config", "--dump-defaults"]) == 0
    text = capsys.readouterr().out
    for key in ("master_seed", "c_grid", "learning_rate", "weights", "patience"):
        assert key in text
    (tmp_path / "d.ini").write_text(text)
    assert ex.load_config(tmp_path / "d.ini").values == ex.ExperimentConfig().values


def test_runtime_keys_do_not_change_digest():
    a = ex.load_config(None, {("experiment", "jobs"): 4, ("experiment", "output_dir"): "/elsewhere"})
    assert a.digest() == ex.ExperimentConfig().digest()
    assert ex.load_config(None, {("experiment", "master_seed"): 1}).digest() != a.digest()


@pytest.mark.parametrize("body", [
    "[experiment]\nbogus = 1\n",
    "[nosuch]\nx = 1\n",
    "[experiment]\nmaster_seed = abc\n",
    "[experiment]\nclassifiers = svm,knn\n",
    "[experiment]\nfolds = 0,12\n",
    "[svm]\nc_grid = 1,-2\n",
    "[resnet_scratch]\nlearning_rate = 0\n",
    "not an ini file",
])
def test_config_errors_exit_2(tmp_path, body, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(body)
    assert cli.main(["generate", "--config", str(path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert cli.main(["generate", "--config", str(tmp_path / "nope.ini")]) == 2


def test_split_before_generate_exit_3(tmp_path, capsys):
    assert cli.main(["split", "--output-dir", str(tmp_path)]) == 3
    assert "generate" in capsys.readouterr().err


def test_repro_outputs(tiny_run):
    cfg, _, run_dir = tiny_run
    manifest = load_manifest(run_dir / "manifest.csv")
    assert len(manifest) == 384 and len(manifest.base_ids) == 48
    plan = load_foldplan(run_dir / "foldplan.json", manifest)
    assert len(plan.folds) == 12
    assert {(len(f.train), len(f.val), len(f.test)) for f in plan.folds} == {(192, 96, 96)}
    rec = json.loads((run_dir / "run.json").read_text())
    assert rec["config_digest"] == cfg.digest() and run_dir.name.endswith(cfg.digest()[:12])
    for name in ("manifest", "foldplan", "metrics"):
        assert (run_dir / rec["artifacts"][name]["path"]).exists()
    assert set(rec["models"]) == {"svm", "resnet_scratch", "resnet_pretrained"}
    assert set(rec["timings"]) >= {"generate", "split", "train", "evaluate", "report"}
    svm_meta = json.loads((run_dir / rec["models"]["svm"]["0"]["meta"]).read_text())
    assert svm_meta["best_C"] in cfg.c_grid and len(svm_meta["grid_scores"]) == 6
    assert (run_dir / "models/resnet_scratch/fold_00/history.json").exists()


def test_report_table(tiny_run):
    _, _, run_dir = tiny_run
    rows = list(csv.reader((run_dir / "reports/table.csv").open()))
    assert rows[0] == ["metric", "SVM", "ResNet-18 (scratch)", "ResNet-18 (pretrained)"]
    assert [r[0] for r in rows[1:]] == ["Validation Acc.", "Test Acc.", "Sensitivity", "Precision"]
    assert rows[1][1] == "N/A"
    assert all(c.endswith("%") for r in rows[1:] for c in r[1:] if c != "N/A")
    for name in ("svm", "resnet_scratch", "resnet_pretrained"):
        for kind in ("sensitivity", "precision"):
            assert (run_dir / f"reports/{name}_{kind}.png").stat().st_size > 0


def test_no_stage_reads_test_before_evaluate(tiny_run):
    _, _, run_dir = tiny_run
    log = [json.loads(line) for line in (run_dir / "access_log.jsonl").read_text().splitlines()]
    assert {e["role"] for e in log if e["stage"] == "train"} == {"train", "val"}
    assert {e["role"] for e in log if e["stage"] == "evaluate"} == {"test"}


def test_rerun_is_idempotent(tiny_run):
    cfg, path, run_dir = tiny_run
    before = {p: p.stat().st_mtime_ns for p in run_dir.rglob("*") if p.is_file() and "models" in p.parts}
    metrics = (run_dir / "reports/metrics.json").read_bytes()
    assert cli.main(["repro-paper", "--config", str(path)]) == 0
    after = {p: p.stat().st_mtime_ns for p in run_dir.rglob("*") if p.is_file() and "models" in p.parts}
    assert before == after
    assert (run_dir / "reports/metrics.json").read_bytes() == metrics
    assert len([p for p in cfg.output_dir.iterdir() if p.name.endswith(cfg.digest()[:12])]) == 1


def test_retraining_reproduces_predictions(tiny_run):
    cfg, path, run_dir = tiny_run
    preds = {p.name: json.loads(p.read_text())["predictions"] for p in (run_dir / "reports/folds").glob("*.json")}
    shutil.rmtree(run_dir / "models")
    assert cli.main(["train", "--config", str(path)]) == 0
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    again = {p.name: json.loads(p.read_text())["predictions"] for p in (run_dir / "reports/folds").glob("*.json")}
    assert again == preds


def test_tampered_artifacts(tiny_run, capsys):
    cfg, path, run_dir = tiny_run
    model = run_dir / "models/svm/fold_00/model.json"
    original = model.read_bytes()
    model.write_bytes(original.replace(b'"C":', b'"C": ', 1))
    try:
        assert cli.main(["evaluate", "--config", str(path)]) == 4
        err = capsys.readouterr().err
        assert str(model) in err and "expected sha256" in err
    finally:
        model.write_bytes(original)
    manifest = run_dir / "manifest.csv"
    original = manifest.read_bytes()
    manifest.write_bytes(original + b"\n")
    try:
        assert cli.main(["split", "--config", str(path)]) == 4
    finally:
        manifest.write_bytes(original)
    moved = model.with_suffix(".bak")
    model.rename(moved)
    try:
        assert cli.main(["evaluate", "--config", str(path)]) == 3
    finally:
        moved.rename(model)
    assert cli.main(["evaluate", "--config", str(path)]) == 0


def test_parallel_training_matches_serial(tmp_path, tiny_run):
    _, _, run_dir = tiny_run
    out = tmp_path / "par"
    common = ["--output-dir", str(out)]
    body = "[experiment]\nclassifiers = svm\nfolds = 0,1\n"
    (tmp_path / "svm.ini").write_text(body)
    args = ["--config", str(tmp_path / "svm.ini")] + common
    assert cli.main(["generate"] + args) == 0
    assert cli.main(["split"] + args) == 0
    assert cli.main(["train", "--jobs", "2"] + args) == 0
    cfg = ex.load_config(tmp_path / "svm.ini", {("experiment", "output_dir"): str(out)})
    rec = json.loads((ex.locate_run_dir(cfg, create=False) / "run.json").read_text())
    serial = json.loads((run_dir / "run.json").read_text())
    # fold 0 of this run shares data, split and seeds with the tiny run
    assert rec["models"]["svm"]["0"]["sha256"] == serial["models"]["svm"]["0"]["sha256"]
    assert set(rec["models"]["svm"]) == {"0", "1"}


def test_train_subset_flags(tiny_run):
    cfg, path, run_dir = tiny_run
    assert cli.main(["train", "--config", str(path), "--classifier", "svm", "--folds", "0", "--force"]) == 0
    assert cli.main(["train", "--config", str(path), "--folds", "0-13"]) == 2


def test_pretrained_weights_missing_exit_3(tmp_path):
    body = f"[experiment]\nclassifiers = resnet_pretrained\nfolds = 0\noutput_dir = {tmp_path}\n" \
           f"[resnet_pretrained]\nweights = {tmp_path}/none.safetensors\n"
    (tmp_path / "c.ini").write_text(body)
    assert cli.main(["generate", "--config", str(tmp_path / "c.ini")]) == 0
    assert cli.main(["split", "--config", str(tmp_path / "c.ini")]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "c.ini")]) == 3
