import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from autosmart.cli import main
from autosmart.data_model import validate_bundle
from autosmart.ingest import load_dataset, parse_info, read_labels


def gen(tmp_path, name, seed=0, **spec):
    spec_path = tmp_path / f"{name}.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / name
    assert main(["gen-data", "--spec", str(spec_path), "--seed", str(seed), "--out", str(out)]) == 0
    return out


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    files = [f for f in cmp.common_files]
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_gen_data_is_deterministic(tmp_path):
    a = gen(tmp_path, "a", seed=5, main_rows=400, n_related=2)
    b = gen(tmp_path, "b", seed=5, main_rows=400, n_related=2)
    c = gen(tmp_path, "c", seed=6, main_rows=400, n_related=2)
    assert same_tree(a, b)
    assert not same_tree(a, c)


def test_gen_data_round_trips(tmp_path):
    out = gen(tmp_path, "d", main_rows=1000, ratio=0.02, test_fraction=0.0)
    info = parse_info((out / "info.json").read_text())
    bundle = load_dataset(out / "train", info)
    validate_bundle(bundle)
    assert abs(int(bundle.labels.sum()) - 20) <= 1


def write_labels(path, labels):
    path.write_text("label\n" + "".join(f"{v}\n" for v in labels))
    return path


def test_score_perfect(tmp_path, capsys):
    labels = write_labels(tmp_path / "y.tsv", [0, 1, 0, 1])
    pred = tmp_path / "p.txt"
    pred.write_text("0.1\n0.9\n0.2\n0.8\n")
    assert main(["score", "--pred", str(pred), "--labels", str(labels)]) == 0
    assert capsys.readouterr().out.splitlines() == ["auc\t1.000000"]


def test_score_with_base_and_max(tmp_path, capsys):
    # positives beat negatives in 4 of 5 pairs
    labels = write_labels(tmp_path / "y.tsv", [0, 0, 0, 0, 0, 1])
    pred = tmp_path / "p.txt"
    pred.write_text("0.1\n0.2\n0.3\n0.4\n0.9\n0.5\n")
    assert main(["score", "--pred", str(pred), "--labels", str(labels),
                 "--auc-base", "0.6", "--auc-max", "0.9"]) == 0
    assert capsys.readouterr().out.splitlines() == ["auc\t0.800000", "score\t0.6667"]


def test_score_length_mismatch(tmp_path, capsys):
    labels = write_labels(tmp_path / "y.tsv", [0, 1, 0])
    pred = tmp_path / "p.txt"
    pred.write_text("0.1\n0.9\n")
    assert main(["score", "--pred", str(pred), "--labels", str(labels)]) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ValueError"


def test_train_missing_config(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "none.json"), "--train", str(tmp_path),
                 "--test", str(tmp_path), "--out", str(tmp_path / "p.txt")])
    assert code == 1
    assert "error" in json.loads(capsys.readouterr().err.strip())


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = gen(root, "data", seed=3, main_rows=3000, n_related=2)
    out = root / "pred.txt"
    proc = subprocess.run(
        [sys.executable, "-m", "autosmart.cli", "train", "--config", str(data / "info.json"),
         "--train", str(data / "train"), "--test", str(data / "test"), "--out", str(out),
         "--budget-s", "60", "--workers", "1"],
        capture_output=True, text=True, timeout=120)
    return data, out, proc


def test_train_writes_predictions_and_manifest(small_run):
    data, out, proc = small_run
    assert proc.returncode == 0, proc.stderr
    preds = np.array([float(v) for v in out.read_text().splitlines()])
    labels = read_labels(data / "test_labels.tsv")
    assert len(preds) == len(labels)
    assert np.all((preds > 0) & (preds < 1))
    manifest = json.loads(out.with_name("pred.txt.manifest.json").read_text())
    assert manifest["n_predictions"] == len(labels)
    assert manifest["seed"] == 0 and manifest["workers"] == 1
    phases = out.with_name("pred.txt.phases.tsv").read_text().splitlines()
    assert phases[0] == "phase\tstart_s\tend_s\test_peak_bytes"
    assert any(line.startswith("train\t") for line in phases)
