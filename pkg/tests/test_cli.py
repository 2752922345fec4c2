import json

import numpy as np
import pytest

from apct.cli import RunConfig, build_parser, main
from apct.corruption import KINDS, SEVERITIES
from apct.errors import ConfigError
from apct.metrics import load_report
from apct.training import read_predictions, write_predictions

TINY = {
    "model": {"n_tokens": 8, "group_size": 8, "dim": 16, "heads": 2, "depths": [1, 1, 1]},
    "train": {"epochs": 2, "batch_size": 8, "warmup_epochs": 0},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-dataset", "--out", str(root / "data"), "--seed", "2", "--train-per-class", "2",
                 "--test-per-class", "1", "--points", "64"]) == 0
    assert main(["corrupt", "--data", str(root / "data"), "--out", str(root / "suite"), "--seed", "5"]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["train", "--config", str(root / "tiny.json"), "--data", str(root / "data"),
                 "--out", str(root / "run"), "--quiet"]) == 0
    assert main(["train", "--config", str(root / "tiny.json"), "--data", str(root / "data"),
                 "--out", str(root / "base"), "--no-drop", "--no-aux", "--quiet"]) == 0
    return root


def test_help_documents_every_command():
    text = build_parser().format_help()
    for cmd in ("gen-dataset", "corrupt", "train", "eval", "report", "inspect-significance", "gradcheck"):
        assert cmd in text


def test_gen_dataset_outputs(workspace, capsys, tmp_path):
    assert len(list((workspace / "data" / "train").glob("*.pcb"))) == 16
    assert len(list((workspace / "data" / "test").glob("*.pcb"))) == 8
    code, out, _ = run(capsys, "gen-dataset", "--out", tmp_path / "again", "--seed", 2, "--train-per-class", 2,
                       "--test-per-class", 1, "--points", 64)
    assert code == 0 and out.strip().endswith("manifest.json")
    for f in sorted((workspace / "data").rglob("*.pcb")):
        assert f.read_bytes() == (tmp_path / "again" / f.relative_to(workspace / "data")).read_bytes()


def test_gen_dataset_refuses_non_empty(workspace, capsys):
    code, _, err = run(capsys, "gen-dataset", "--out", workspace / "data")
    assert code != 0
    assert err.startswith("apct: error[config]:") and len(err.strip().splitlines()) == 1


def test_gen_dataset_rejects_few_points(capsys, tmp_path):
    code, _, err = run(capsys, "gen-dataset", "--out", tmp_path / "d", "--points", 4)
    assert code != 0 and "at least 8" in err


def test_corrupt_full_and_single(workspace, capsys, tmp_path):
    dirs = [p for p in (workspace / "suite").iterdir() if p.is_dir()]
    assert len(dirs) == 35
    code, _, _ = run(capsys, "corrupt", "--data", workspace / "data", "--out", tmp_path / "one", "--seed", 5,
                     "--kind", "jitter", "--severity", 2)
    assert code == 0
    assert [p.name for p in (tmp_path / "one").iterdir() if p.is_dir()] == ["jitter_2"]
    for f in (tmp_path / "one" / "jitter_2").iterdir():
        assert f.read_bytes() == (workspace / "suite" / "jitter_2" / f.name).read_bytes()


def test_corrupt_unknown_kind(workspace, capsys, tmp_path):
    code, _, err = run(capsys, "corrupt", "--data", workspace / "data", "--out", tmp_path / "x",
                       "--kind", "blur", "--severity", 1)
    assert code != 0
    assert "error[spec]" in err and "add_local" in err


def test_train_outputs_and_reproducibility(workspace, capsys, tmp_path):
    assert (workspace / "run" / "model.apct").exists()
    log = json.loads((workspace / "run" / "trainlog.json").read_text())
    assert len(log["epochs"]) == 2
    cfg = json.loads((workspace / "run" / "config.json").read_text())
    assert cfg["model"]["drop"] is True
    assert json.loads((workspace / "base" / "config.json").read_text())["model"]["drop"] is False
    code, _, _ = run(capsys, "train", "--config", workspace / "tiny.json", "--data", workspace / "data",
                     "--out", tmp_path / "again", "--quiet")
    assert code == 0
    assert (tmp_path / "again" / "model.apct").read_bytes() == (workspace / "run" / "model.apct").read_bytes()


def test_train_rejects_unknown_config_key(workspace, capsys, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"width": 3}}))
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.json", "--data", workspace / "data",
                       "--out", tmp_path / "r")
    assert code != 0 and "width" in err
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"suite": {}})


def test_eval_split_and_cell(workspace, capsys, tmp_path):
    code, out, _ = run(capsys, "eval", "--model", workspace / "run" / "model.apct", "--data", workspace / "data",
                       "--pred-out", tmp_path / "p.csv")
    assert code == 0 and out.startswith("oa=")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "id,pred,label" and len(lines) == 9
    run(capsys, "eval", "--model", workspace / "run" / "model.apct", "--data", workspace / "data",
        "--pred-out", tmp_path / "q.csv")
    assert (tmp_path / "q.csv").read_text() == (tmp_path / "p.csv").read_text()
    code, out, _ = run(capsys, "eval", "--model", workspace / "run" / "model.apct",
                       "--suite-cell", workspace / "suite" / "rotate_4")
    assert code == 0 and "n=8" in out


def test_eval_suite_and_report(workspace, capsys, tmp_path):
    for name in ("run", "base"):
        code, _, _ = run(capsys, "eval", "--model", workspace / name / "model.apct", "--data", workspace / "data",
                         "--suite", workspace / "suite", "--pred-out", tmp_path / name)
        assert code == 0
        assert len(list((tmp_path / name).glob("*.csv"))) == 36
    (tmp_path / "base" / "add_local_5.csv").unlink()
    code, _, err = run(capsys, "report", "--model-preds-dir", tmp_path / "run", "--ref-preds-dir", tmp_path / "base",
                       "--out", tmp_path / "r.json")
    assert code != 0 and "add_local_5" in err


def _noisy_preds(root):
    r = np.random.default_rng(0)
    labels = r.integers(0, 8, 30)
    ids = [f"s{i}" for i in range(30)]
    root.mkdir()
    write_predictions(root / "clean.csv", ids, labels, labels)
    for k in KINDS:
        for s in SEVERITIES:
            preds = np.where(r.random(30) < 0.1 * s, (labels + 1) % 8, labels)
            write_predictions(root / f"{k}_{s}.csv", ids, preds, labels)


def test_report_against_itself(workspace, capsys, tmp_path):
    _noisy_preds(tmp_path / "p")
    code, out, err = run(capsys, "report", "--model-preds-dir", tmp_path / "p", "--ref-preds-dir", tmp_path / "p",
                         "--suite", workspace / "suite", "--out", tmp_path / "self.json")
    assert code == 0 and "mCE=100.0 RmCE=100.0" in out, err
    rep = load_report(tmp_path / "self.json")
    assert rep.severity_table["jitter"][0] == 0.01
    assert rep.to_dict()["percent"]["mCE"] == "100.0"


def test_report_degenerate_reference(capsys, tmp_path):
    _noisy_preds(tmp_path / "model")
    ref = tmp_path / "ref"
    ref.mkdir()
    for f in (tmp_path / "model").iterdir():
        ids, _, labels = read_predictions(f)
        write_predictions(ref / f.name, ids, labels, labels)
    code, _, err = run(capsys, "report", "--model-preds-dir", tmp_path / "model", "--ref-preds-dir", ref,
                       "--out", tmp_path / "r.json")
    assert code != 0 and err.startswith("apct: error[degenerate-reference]")


def test_inspect_significance(workspace, capsys, tmp_path):
    cloud = next((workspace / "data" / "test").glob("*.pcb"))
    args = ("inspect-significance", "--model", workspace / "run" / "model.apct", "--cloud", cloud)
    code, _, _ = run(capsys, *args, "--out", tmp_path / "a.json", "--svg", tmp_path / "a.svg")
    assert code == 0
    dump = json.loads((tmp_path / "a.json").read_text())
    assert [s["stage"] for s in dump["stages"]] == [1, 2, 3]
    for s in dump["stages"]:
        assert sum(t["count"] for t in s["tokens"]) == 2 * 16
        assert all(0.05 <= t["rate"] <= 0.95 for t in s["tokens"])
    run(capsys, *args, "--out", tmp_path / "b.json")
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    assert (tmp_path / "a.svg").read_text().startswith("<svg")
    run(capsys, *args, "--out", tmp_path / "c.json", "--stage", 2)
    assert [s["stage"] for s in json.loads((tmp_path / "c.json").read_text())["stages"]] == [2]


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--entries", 20)
    assert code == 0 and out.startswith("gradcheck PASS")


def test_missing_file_is_one_line_error(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--model", tmp_path / "nope.apct", "--data", tmp_path)
    assert code != 0 and err.startswith("apct: error[io]:") and len(err.strip().splitlines()) == 1


def test_kinds_and_severities_cover_suite():
    assert len(KINDS) * len(SEVERITIES) == 35
