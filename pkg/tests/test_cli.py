"""Tests for the specfm command line"""

import argparse
import json
from pathlib import Path

import numpy as np
import pytest

from specfm.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main
from specfm.config import EncoderConfig
from specfm.encoder import SpectrumEncoder, encoder_checkpoint
from specfm.ms_io import load_embeddings, read_scores

GOLDEN_FLAGS = Path(__file__).parent / "data" / "cli_flags.txt"


def _flag_lines():
    parser = build_parser()
    lines = ["specfm: " + " ".join(sorted(s for a in parser._actions for s in a.option_strings))]
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name in sorted(subparsers.choices):
        options = sorted(s for a in subparsers.choices[name]._actions for s in a.option_strings)
        lines.append(f"{name}: " + " ".join(options))
    return lines


def _synth(tmp_path, task, n=30, seed=0, name=None):
    stem = tmp_path / (name or f"{task}_{seed}")
    mgf, labels = f"{stem}.mgf", f"{stem}.tsv"
    code = main(["synth", "--task", task, "--n", str(n), "--seed", str(seed), "--out", mgf, "--labels", labels])
    assert code == EXIT_OK
    return mgf, labels


def test_help_flags_match_golden_file():
    assert _flag_lines() == GOLDEN_FLAGS.read_text(encoding="utf-8").splitlines()


def test_synth_is_deterministic(tmp_path):
    a = _synth(tmp_path, "phospho", seed=3, name="a")
    b = _synth(tmp_path, "phospho", seed=3, name="b")
    assert Path(a[0]).read_bytes() == Path(b[0]).read_bytes()
    assert Path(a[1]).read_text() == Path(b[1]).read_text()
    manifest = Path(f"{a[0]}.manifest").read_text(encoding="utf-8").splitlines()
    assert manifest[:2] == ["command = synth", "seed = 3"]
    assert "synth.task = phospho" in manifest


def test_seed_overrides_set(tmp_path):
    out = tmp_path / "x.mgf"
    assert main(["synth", "--n", "2", "--set", "synth.seed=9", "--seed", "4", "--out", str(out)]) == EXIT_OK
    manifest = Path(f"{out}.manifest").read_text(encoding="utf-8").splitlines()
    assert "seed = 4" in manifest
    assert "head.seed = 4" in manifest


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["synth"],
        ["nosuch"],
        ["synth", "--out", "x.mgf", "--n", "many"],
        ["synth", "--out", "x.mgf", "--set", "nosuch.key=1"],
        ["synth", "--out", "x.mgf", "--set", "synth.n=-1"],
    ],
)
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_USAGE


def test_missing_input_file(tmp_path, capsys):
    code = main(["eval", "--scores", str(tmp_path / "none.tsv"), "--labels", str(tmp_path / "none.tsv"), "--json", str(tmp_path / "m.json")])
    assert code == EXIT_DATA
    assert "specfm eval: " in capsys.readouterr().err


def test_invalid_utf8_inputs_exit_with_data_error(tmp_path, capsys):
    mgf = tmp_path / "bad.mgf"
    mgf.write_bytes(b"BEGIN IONS\nTITLE=scan\xff1\nPEPMASS=500.0\n150.0 1.0\nEND IONS\n")
    code = main(["train-baseline", "--kind", "oxonium-ratio", "--test", str(mgf), "--scores", str(tmp_path / "s.tsv")])
    assert code == EXIT_DATA
    assert "not valid UTF-8 at byte offset 21" in capsys.readouterr().err

    scores = tmp_path / "scores.tsv"
    labels = tmp_path / "labels.tsv"
    scores.write_text("run_id\tscan_id\tscore\nr\ta\t0.2\nr\tb\t0.7\n", encoding="utf-8")
    labels.write_bytes(b"run_id\tscan_id\ttask\tlabel\nr\ta\tphospho\t1\nr\tb\tphospho\t0\xc0\n")
    code = main(["eval", "--scores", str(scores), "--labels", str(labels), "--json", str(tmp_path / "m.json")])
    assert code == EXIT_DATA
    assert "labels.tsv is not valid UTF-8" in capsys.readouterr().err


def test_eval_single_class_labels(tmp_path, capsys):
    scores = tmp_path / "scores.tsv"
    labels = tmp_path / "labels.tsv"
    scores.write_text("run_id\tscan_id\tscore\nr\ta\t0.2\nr\tb\t0.7\n", encoding="utf-8")
    labels.write_text("run_id\tscan_id\ttask\tlabel\nr\ta\tphospho\t1\nr\tb\tphospho\t1\n", encoding="utf-8")
    code = main(["eval", "--scores", str(scores), "--labels", str(labels), "--json", str(tmp_path / "m.json")])
    assert code == EXIT_DATA
    assert "specfm eval: degenerate labels" in capsys.readouterr().err
    assert not (tmp_path / "m.json").exists()


def test_eval_writes_metrics_and_curves(tmp_path):
    scores = tmp_path / "scores.tsv"
    labels = tmp_path / "labels.tsv"
    scores.write_text("run_id\tscan_id\tscore\nr\ta\t0.1\nr\tb\t0.4\nr\tc\t0.35\nr\td\t0.8\n", encoding="utf-8")
    labels.write_text(
        "run_id\tscan_id\ttask\tlabel\nr\ta\tchimera\t0\nr\tb\tchimera\t0\nr\tc\tchimera\t1\nr\td\tchimera\t1\n",
        encoding="utf-8",
    )
    out = tmp_path / "m.json"
    argv = ["eval", "--scores", str(scores), "--labels", str(labels), "--json", str(out)]
    assert main(argv + ["--roc", str(tmp_path / "roc.csv"), "--pr", str(tmp_path / "pr.csv")]) == EXIT_OK
    metrics = json.loads(out.read_text(encoding="utf-8"))
    assert metrics["task"] == "chimera"
    assert metrics["auroc"] == pytest.approx(0.75)
    assert (tmp_path / "roc.csv").read_text().startswith("threshold,fpr,tpr\n")
    assert (tmp_path / "pr.csv").read_text().startswith("threshold,recall,precision\n")
    assert Path(f"{out}.manifest").exists()


def test_embed_train_head_and_pca(tmp_path):
    train_mgf, train_labels = _synth(tmp_path, "phospho", n=30, seed=0)
    valid_mgf, valid_labels = _synth(tmp_path, "phospho", n=20, seed=1)
    checkpoint = tmp_path / "enc.scpt"
    checkpoint.write_bytes(encoder_checkpoint(SpectrumEncoder(EncoderConfig(d_model=16, n_layers=1, n_heads=2))))

    train_emb, valid_emb = tmp_path / "train.semb", tmp_path / "valid.semb"
    assert main(["embed", "--checkpoint", str(checkpoint), "--in", train_mgf, "--out", str(train_emb)]) == EXIT_OK
    assert main(["embed", "--checkpoint", str(checkpoint), "--in", valid_mgf, "--out", str(valid_emb)]) == EXIT_OK
    matrix = load_embeddings(train_emb)
    assert matrix.dim == 16 and matrix.n_rows == 30

    scores = tmp_path / "scores.tsv"
    code = main([
        "train-head", "--task", "phospho", "--emb", str(train_emb), "--labels", train_labels,
        "--valid-emb", str(valid_emb), "--valid-labels", valid_labels,
        "--test-emb", str(valid_emb), "--scores", str(scores), "--out", str(tmp_path / "head.scpt"),
        "--set", "head.max_epochs=2",
    ])
    assert code == EXIT_OK
    assert len(read_scores(scores.read_text(encoding="utf-8"))) == 20

    pca_out = tmp_path / "pca.csv"
    code = main(["pca", "--emb", str(train_emb), "--labels", train_labels, "--k", "3", "--out", str(pca_out)])
    assert code == EXIT_OK
    lines = pca_out.read_text(encoding="utf-8").splitlines()
    assert lines[1] == "scan_id,pc1,pc2,pc3,label"
    assert len(lines) == 32


def test_oxonium_ratio_baseline(tmp_path):
    mgf, labels = _synth(tmp_path, "glyco", n=200, seed=0)
    scores = tmp_path / "ratio.tsv"
    code = main(["train-baseline", "--kind", "oxonium-ratio", "--test", mgf, "--scores", str(scores)])
    assert code == EXIT_OK
    metrics = tmp_path / "m.json"
    assert main(["eval", "--scores", str(scores), "--labels", labels, "--json", str(metrics)]) == EXIT_OK
    assert json.loads(metrics.read_text())["auroc"] > 0.95


def test_binned_baseline_needs_training_data(tmp_path):
    mgf, _ = _synth(tmp_path, "quality", n=5)
    code = main(["train-baseline", "--kind", "binned", "--test", mgf, "--scores", str(tmp_path / "s.tsv")])
    assert code == EXIT_USAGE


def test_pretrain_denovo_writes_log(tmp_path):
    mgf, _ = _synth(tmp_path, "denovo", n=8)
    valid, _ = _synth(tmp_path, "denovo", n=4, seed=1)
    out, log = tmp_path / "denovo.scpt", tmp_path / "log.tsv"
    code = main([
        "pretrain-denovo", "--train", mgf, "--valid", valid, "--out", str(out), "--log", str(log),
        "--set", "encoder.d_model=16", "--set", "encoder.n_layers=1",
        "--set", "decoder.n_layers=1", "--set", "pretrain.max_steps=3", "--set", "pretrain.warmup_steps=0",
    ])
    assert code == EXIT_OK
    rows = log.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "step\ttask\tsplit\tloss\tauroc"
    assert rows[-1].startswith("3\tdenovo\tvalid\t")
    assert np.isfinite(float(rows[-1].split("\t")[3]))


def test_pretrain_embed_head_eval_pipeline(tmp_path):
    denovo, _ = _synth(tmp_path, "denovo", n=8)
    checkpoint = tmp_path / "denovo.scpt"
    small = ["--set", "encoder.d_model=16", "--set", "encoder.n_layers=1", "--set", "decoder.n_layers=1"]
    code = main([
        "pretrain-denovo", "--train", denovo, "--out", str(checkpoint),
        "--set", "pretrain.max_steps=3", "--set", "pretrain.warmup_steps=0", *small,
    ])
    assert code == EXIT_OK

    train_mgf, train_labels = _synth(tmp_path, "phospho", n=30, seed=0)
    test_mgf, test_labels = _synth(tmp_path, "phospho", n=20, seed=1)
    train_emb, test_emb = tmp_path / "train.semb", tmp_path / "test.semb"
    for mgf, emb in ((train_mgf, train_emb), (test_mgf, test_emb)):
        assert main(["embed", "--checkpoint", str(checkpoint), "--in", mgf, "--out", str(emb)]) == EXIT_OK

    scores = tmp_path / "scores.tsv"
    code = main([
        "train-head", "--task", "phospho", "--emb", str(train_emb), "--labels", train_labels,
        "--valid-emb", str(test_emb), "--valid-labels", test_labels,
        "--test-emb", str(test_emb), "--scores", str(scores), "--out", str(tmp_path / "head.scpt"),
        "--set", "head.max_epochs=3",
    ])
    assert code == EXIT_OK

    metrics = tmp_path / "m.json"
    assert main(["eval", "--scores", str(scores), "--labels", test_labels, "--json", str(metrics)]) == EXIT_OK
    assert 0.0 <= json.loads(metrics.read_text())["auroc"] <= 1.0
