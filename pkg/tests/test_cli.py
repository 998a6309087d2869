"""Command-line harness: artifacts, manifests, exit codes, determinism."""

import json
from pathlib import Path

import numpy as np
import pytest

from rwpcl import synthdata, textprep
from rwpcl.checkpoint import load_checkpoint
from rwpcl.cli import CONFIG_SCHEMA, _config_epilog, build_parser, main
from rwpcl.evaldeploy import load_probabilities, save_probabilities

FAST = [
    "--set", "model.dim=16", "--set", "model.heads=2", "--set", "model.ff_dim=32",
    "--set", "model.layers=1", "--set", "prep.max_len=12", "--set", "prep.min_count=1",
    "--set", "train.epochs=2", "--set", "train.patience=2", "--set", "train.batch_size=16",
]


def _synth(tmp_path, name="data.jsonl", n=120, extra=()):
    path = tmp_path / name
    code = main(["synth", str(path), "--out-dir", str(tmp_path / "synth_out"),
                 "--set", f"synth.n_examples={n}", "--set", "synth.flip_rate=0.0",
                 "--set", "synth.min_tokens=4", "--set", "synth.max_tokens=8",
                 *extra])
    assert code == 0
    return path


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_loadable_dataset(tmp_path):
    path = _synth(tmp_path)
    meta, posts = textprep.load_dataset(path)
    assert meta.num_classes == 2
    assert len(posts) == 120


def test_synth_deterministic_bytes(tmp_path):
    a = _synth(tmp_path, "a.jsonl")
    b = _synth(tmp_path, "b.jsonl")
    assert a.read_bytes() == b.read_bytes()


def test_synth_balanced_counts(tmp_path):
    path = _synth(tmp_path, n=1000)
    _, posts = textprep.load_dataset(path)
    counts = np.bincount([p.label for p in posts], minlength=2)
    assert counts.tolist() == [500, 500]


def test_synth_zero_flip_rule_classifier_is_perfect(tmp_path):
    path = _synth(tmp_path, n=200)
    _, posts = textprep.load_dataset(path)
    spec = synthdata.SyntheticSpec(n_examples=200, flip_rate=0.0)
    for post in posts:
        assert synthdata.true_class_of(spec, post.text) == post.label


def test_synth_flip_rate_recount_oracle(tmp_path):
    path = tmp_path / "flip.jsonl"
    assert main(["synth", str(path), "--out-dir", str(tmp_path / "o"),
                 "--set", "synth.n_examples=10000", "--set", "synth.flip_rate=0.1"]) == 0
    _, posts = textprep.load_dataset(path)
    spec = synthdata.SyntheticSpec(n_examples=10000, flip_rate=0.1)
    flipped = sum(1 for p in posts if synthdata.true_class_of(spec, p.text) != p.label)
    assert abs(flipped / 10000 - 0.1) <= 0.01


# ---------------------------------------------------------------------------
# preprocess

def test_preprocess_artifacts_reload(tmp_path):
    data = _synth(tmp_path)
    out = tmp_path / "prep"
    assert main(["preprocess", str(data), "--out-dir", str(out), *FAST]) == 0
    vocab = textprep.Vocabulary.load(out / "vocab.tsv")
    cache = np.load(out / "tokens.npz")
    assert cache["ids"].shape == (120, 12)
    assert cache["mask"].shape == (120, 12)
    assert int(cache["num_classes"]) == 2
    assert cache["ids"].max() < len(vocab)
    manifest = json.loads((out / "preprocess_manifest.json").read_text())
    assert manifest["command"] == "preprocess"
    assert str(data) in manifest["inputs"]


# ---------------------------------------------------------------------------
# train

def test_train_artifacts(tmp_path):
    data = _synth(tmp_path)
    out = tmp_path / "train"
    assert main(["train", str(data), "--out-dir", str(out), "--seed", "1", *FAST]) == 0
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert rows and set(rows[0]) == {"epoch", "ce1", "ce2", "bt", "total",
                                     "val_macro_f1", "val_precision", "val_recall"}
    ckpt = load_checkpoint(out / "checkpoint.rwpc")
    assert "classifier.weight" in ckpt
    probs = load_probabilities(out / "probs_test.jsonl")
    report = json.loads((out / "test_report.json").read_text())
    assert probs.probs.shape[0] == report["confusion"][0][0] + report["confusion"][0][1] \
        + report["confusion"][1][0] + report["confusion"][1][1]
    manifest = json.loads((out / "train_manifest.json").read_text())
    assert manifest["seed"] == 1


def test_train_metrics_rerun_byte_identical(tmp_path):
    data = _synth(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert main(["train", str(data), "--out-dir", str(out), "--seed", "7",
                     "--deterministic", *FAST]) == 0
    assert (out_a / "metrics.jsonl").read_bytes() == (out_b / "metrics.jsonl").read_bytes()


def test_train_ablation_table(tmp_path):
    data = _synth(tmp_path)
    out = tmp_path / "abl"
    assert main(["train", str(data), "--ablation", "--out-dir", str(out), *FAST]) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert set(table["macro_f1"]) == {"baseline", "rwp", "rwp_cl"}
    text = (out / "ablation_table.txt").read_text()
    assert "baseline" in text and "rwp_cl" in text
    for name in ("baseline", "rwp", "rwp_cl"):
        assert (out / f"metrics_{name}.jsonl").exists()
        assert (out / f"checkpoint_{name}.rwpc").exists()


# ---------------------------------------------------------------------------
# grid / kfold

def test_grid_cell_count_and_artifacts(tmp_path):
    data = _synth(tmp_path)
    out = tmp_path / "grid"
    assert main(["grid", str(data), "--out-dir", str(out), *FAST,
                 "--set", "train.epochs=1", "--set", "train.patience=1",
                 "--set", "grid.batch_sizes=16", "--set", "grid.epsilons=1e-4,1e-3",
                 "--set", "grid.lambdas=0.1,0.5"]) == 0
    results = json.loads((out / "grid_results.json").read_text())
    assert len(results["cells"]) == 1 * 2 * 2
    assert (out / "sweep_table.txt").read_text().count("batch_size=") == 1
    best_cfg = (out / "best_config.txt").read_text()
    assert "train.epsilon=" in best_cfg
    # the emitted best config round-trips as a config file
    out2 = tmp_path / "train_best"
    assert main(["train", str(data), "--config", str(out / "best_config.txt"),
                 "--out-dir", str(out2), *FAST, "--set", "train.epochs=1"]) == 0


def test_kfold_report(tmp_path):
    data = _synth(tmp_path, n=100)
    out = tmp_path / "kf"
    assert main(["kfold", str(data), "--out-dir", str(out), *FAST,
                 "--set", "train.epochs=1", "--set", "train.patience=1",
                 "--set", "kfold.k=4", "--set", "kfold.val_fraction=0.2"]) == 0
    report = json.loads((out / "folds_report.json").read_text())
    assert report["k"] == 4
    assert len(report["folds"]) == 4
    assert report["completed_folds"] == 4
    scores = [f["macro_f1"] for f in report["folds"]]
    assert report["macro_f1_mean"] == pytest.approx(float(np.mean(scores)), abs=1e-9)


# ---------------------------------------------------------------------------
# ensemble

def _write_probs(path, model_id, probs):
    save_probabilities(path, model_id, probs)
    return path


def test_ensemble_command(tmp_path):
    rng = np.random.default_rng(0)
    raw1, raw2 = rng.random((10, 2)), rng.random((10, 2))
    p1 = raw1 / raw1.sum(axis=1, keepdims=True)
    p2 = raw2 / raw2.sum(axis=1, keepdims=True)
    f1 = _write_probs(tmp_path / "m1.jsonl", "m1", p1)
    f2 = _write_probs(tmp_path / "m2.jsonl", "m2", p2)
    out = tmp_path / "ens"
    assert main(["ensemble", str(f1), str(f2), "--out-dir", str(out)]) == 0
    preds = [json.loads(line) for line in (out / "predictions.jsonl").read_text().splitlines()]
    assert len(preds) == 10
    mean = (p1 + p2) / 2
    assert [p["label"] for p in preds] == mean.argmax(axis=1).tolist()


def test_ensemble_with_gold_metrics(tmp_path):
    labels = np.array([0, 1, 0, 1])
    probs = np.eye(2)[labels]
    f1 = _write_probs(tmp_path / "m.jsonl", "m", probs)
    gold = tmp_path / "gold.jsonl"
    textprep.save_dataset(gold, textprep.DatasetMeta("g", 2),
                          [textprep.RawPost(f"text {i}", int(l)) for i, l in enumerate(labels)])
    out = tmp_path / "ens"
    assert main(["ensemble", str(f1), "--gold", str(gold), "--out-dir", str(out)]) == 0
    report = json.loads((out / "ensemble_report.json").read_text())
    assert report["metrics"]["macro_f1"] == 1.0


def test_ensemble_gold_length_mismatch_exit_3(tmp_path):
    f1 = _write_probs(tmp_path / "m.jsonl", "m", np.eye(2))
    gold = tmp_path / "gold.jsonl"
    textprep.save_dataset(gold, textprep.DatasetMeta("g", 2),
                          [textprep.RawPost("only one", 0)])
    assert main(["ensemble", str(f1), "--gold", str(gold), "--out-dir", str(tmp_path / "o")]) == 3


# ---------------------------------------------------------------------------
# gradcheck

def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--out-dir", str(out)]) == 0
    captured = capsys.readouterr().out
    assert "PASS" in captured and "FAIL" not in captured
    report = json.loads((out / "gradcheck_report.json").read_text())
    assert report["passed"] is True
    assert report["max_rel_err"] < 1e-3


# ---------------------------------------------------------------------------
# errors and help

def test_missing_dataset_exits_3(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.jsonl"), "--out-dir", str(tmp_path / "o")]) == 3
    assert "error kind=input" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    data = _synth(tmp_path)
    assert main(["train", str(data), "--set", "bogus.key=1",
                 "--out-dir", str(tmp_path / "o")]) == 2
    assert "error kind=config" in capsys.readouterr().err


def test_bad_config_value_exits_2(tmp_path, capsys):
    data = _synth(tmp_path)
    assert main(["train", str(data), "--set", "train.epochs=banana",
                 "--out-dir", str(tmp_path / "o")]) == 2
    assert "error kind=config" in capsys.readouterr().err


def test_invalid_lambda_exits_2(tmp_path):
    data = _synth(tmp_path)
    assert main(["train", str(data), "--set", "train.lambda=1.5",
                 "--out-dir", str(tmp_path / "o"), *FAST]) == 2


def test_help_epilog_matches_golden():
    golden = (Path(__file__).parent / "data" / "cli_help_golden.txt").read_text()
    assert _config_epilog() + "\n" == golden


def test_help_lists_every_config_key():
    help_text = build_parser().format_help()
    for key, (kind, default, _) in CONFIG_SCHEMA.items():
        assert key in help_text
        assert kind in help_text
    assert "exit codes" in help_text
