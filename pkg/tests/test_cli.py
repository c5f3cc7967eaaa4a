import csv
import json

import pytest

from anchorset.anchors import read_anchors
from anchorset.cli import main
from anchorset.trainer import TrainLog

FAST = ["--e-start", "2", "--e-end", "4"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out-dir", str(d), "--C", "20", "--per-class", "6", "--D-in", "8",
                 "--noise-dims", "2", "--queries-per-class", "2", "--seed", "3"]) == 0
    return d


def _train(data_dir, out, *extra):
    return main(["train", "--train", str(data_dir / "train.txt"), "--query", str(data_dir / "query.txt"),
                 "--gallery", str(data_dir / "gallery.txt"), "--out-dir", str(out), *FAST, *extra])


def test_gen_data_files(data_dir):
    for name in ("train", "query", "gallery"):
        assert (data_dir / f"{name}.txt").exists()
    head = (data_dir / "query.txt").read_text().splitlines()[0]
    assert head.startswith("anchorset-dataset v1 C=20 D=8") and "split=query" in head


def test_train_outputs_and_determinism(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "a", "--save-stage1") == 0
    assert _train(data_dir, tmp_path / "b", "--save-stage1") == 0
    a = (tmp_path / "a" / "train_log.jsonl").read_text()
    assert a == (tmp_path / "b" / "train_log.jsonl").read_text()
    log = TrainLog.from_jsonl(a)
    assert [r["epoch"] for r in log.records] == [0, 1, 2, 3]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["finished"] and manifest["config"]["E_end"] == 4
    assert (tmp_path / "a" / "stage1.npz").exists()


def test_resume_stage2_only_and_eval(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "s", "--save-stage1") == 0
    assert main(["train", "--train", str(data_dir / "train.txt"), "--out-dir", str(tmp_path / "r"),
                 "--from", str(tmp_path / "s" / "stage1.npz"), "--stage2-only", *FAST,
                 "--schedule", "iteration", "--stage2-loss", "cls", "--stage2-loss", "triplet-anchor"]) == 0
    log = TrainLog.from_jsonl((tmp_path / "r" / "train_log.jsonl").read_text())
    assert [r["stage"] for r in log.records] == [1, 1, 2, 2]
    out = tmp_path / "report.json"
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.npz"),
                 "--query", str(data_dir / "query.txt"), "--gallery", str(data_dir / "gallery.txt"),
                 "--ks", "1", "3", "--exclude-same-group", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report["rank_at"]) == {"1", "3"} and 0 <= report["mAP"] <= 1
    assert report["excluded_same_group"] is True


def test_export_anchors(data_dir, tmp_path):
    assert _train(data_dir, tmp_path / "t") == 0
    out = tmp_path / "anchors.txt"
    assert main(["export-anchors", "--checkpoint", str(tmp_path / "t" / "checkpoint.npz"),
                 "--train", str(data_dir / "train.txt"), "--aggregation", "weighted", "--out", str(out)]) == 0
    s = read_anchors(out)
    assert s.n_classes == 20 and s.method == "weighted"


def test_config_file_and_overrides(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"E_start": 1, "E_end": 3, "P": 5, "K": 2, "feat_dim": 6}))
    assert main(["train", "--config", str(cfg), "--e-end", "2", "--train", str(data_dir / "train.txt"),
                 "--out-dir", str(tmp_path / "c")]) == 0
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["config"]["E_end"] == 2 and manifest["config"]["P"] == 5


@pytest.mark.slow
def test_ablate_and_variance(tmp_path):
    out = tmp_path / "ablate.csv"
    assert main(["ablate", "--e-starts", "0", "1", "--e-start", "1", "--e-end", "3", "--aggregations", "average",
                 "--losses", "anchor", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["E_start"] for r in rows] == ["", "0", "1"]
    out = tmp_path / "var.csv"
    summary = tmp_path / "summary.json"
    assert main(["variance", "--n-seeds", "2", "--e-start", "1", "--e-end", "3",
                 "--out", str(out), "--summary", str(summary)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["variant"] for r in rows} == {"anchor", "parametric_center"} and len(rows) == 4
    assert set(json.loads(summary.read_text())) == {"anchor", "parametric_center"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(data_dir, tmp_path, capsys):
    assert main(["train", "--train", str(tmp_path / "missing.txt"), "--out-dir", str(tmp_path / "x")]) == 4
    bad = tmp_path / "bad.txt"
    bad.write_text("anchorset-dataset v1 C=2 D=2\n0,0,1\n")
    assert main(["train", "--train", str(bad), "--out-dir", str(tmp_path / "x")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["train", "--train", str(data_dir / "train.txt"), "--out-dir", str(tmp_path / "x"),
                 "--e-start", "5", "--e-end", "5"]) == 1
    assert main(["train", "--train", str(data_dir / "train.txt"), "--out-dir", str(tmp_path / "x"),
                 "--stage2-only"]) == 1
    assert main(["train", "--train", str(data_dir / "train.txt"), "--out-dir", str(tmp_path / "x"),
                 "--lr", "1e250", "--e-start", "1", "--e-end", "2"]) == 3
    assert main(["eval", "--checkpoint", str(bad), "--query", str(bad), "--gallery", str(bad)]) == 4
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
