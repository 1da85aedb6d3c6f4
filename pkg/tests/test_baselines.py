"""Tests for gradient boosted trees and the binned and oxonium baselines"""

import numpy as np
import pytest

from specfm.baselines import (
    GbdtModel,
    bin_resolution_sweep,
    binned_baseline,
    gbdt_fit,
    gbdt_predict,
    load_gbdt,
    load_model_file,
    oxonium_baselines,
    save_gbdt,
    save_model_file,
    write_bin_sweep,
)
from specfm.config import GbdtConfig, SynthConfig
from specfm.errors import DegenerateInput, DegenerateLabels, DegenerateValidation, FormatError
from specfm.metrics import auroc
from specfm.synthgen import gen_dataset

from .conftest import slow

XOR_X = np.repeat(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]), 4, axis=0)
XOR_Y = np.repeat([0, 1, 1, 0], 4)


def _split(records):
    return [r.spectrum for r in records], [r.provenance.label for r in records]


# Boosting


def test_separable_one_feature():
    x = np.repeat([[0.0], [1.0], [2.0], [3.0]], 4, axis=0)
    y = np.repeat([0, 0, 1, 1], 4)
    model = gbdt_fit(x, y, cfg=GbdtConfig(max_rounds=5))
    p = gbdt_predict(model, x)
    assert model.n_rounds_fit == 5 and len(model.trees) == 5
    assert np.all(p[y == 0] < 0.5) and np.all(p[y == 1] > 0.5)


def test_xor_needs_depth_two():
    deep = gbdt_fit(XOR_X, XOR_Y, cfg=GbdtConfig(max_depth=2, max_rounds=1))
    assert auroc(gbdt_predict(deep, XOR_X), XOR_Y) == 1.0
    stump = gbdt_fit(XOR_X, XOR_Y, cfg=GbdtConfig(max_depth=1, max_rounds=1))
    assert auroc(gbdt_predict(stump, XOR_X), XOR_Y) <= 0.75


def test_early_stopping_on_flat_validation():
    x = np.array([[0.0], [1.0], [2.0], [3.0]] * 3)
    y = [0, 0, 1, 1] * 3
    flat = np.zeros((4, 1))
    model = gbdt_fit(x, y, flat, [0, 1, 0, 1], GbdtConfig(early_stopping_rounds=32))
    assert model.best_round == 1
    assert model.n_rounds_fit == 33
    assert len(model.trees) == 1
    assert model.best_auroc == 0.5


def test_training_loss_never_increases(rng):
    x = rng.normal(size=(200, 4))
    y = (x[:, 0] + 0.5 * rng.normal(size=200) > 0).astype(int)
    model = gbdt_fit(x, y, cfg=GbdtConfig(max_rounds=40))
    margin = np.full(200, model.base_score)
    losses = []
    for tree in model.trees:
        margin = margin + tree.predict(x)
        losses.append(np.mean(np.logaddexp(0.0, margin) - y * margin))
    assert len(losses) == 40
    assert np.all(np.diff(losses) <= 1e-12)


def test_model_truncated_at_best_round(rng):
    x, xv = rng.normal(size=(300, 3)), rng.normal(size=(150, 3))
    y = (x[:, 0] + rng.normal(size=300) > 0).astype(int)
    yv = (xv[:, 0] + rng.normal(size=150) > 0).astype(int)
    model = gbdt_fit(x, y, xv, yv, GbdtConfig(early_stopping_rounds=5))
    assert len(model.trees) == model.best_round
    assert model.n_rounds_fit == model.best_round + 5
    assert auroc(model.margin(xv), yv) == model.best_auroc


def test_zero_trees_predict_prior():
    model = GbdtModel(base_score=float(np.log(0.3 / 0.7)), trees=[], n_features=3)
    assert gbdt_predict(model, np.zeros((4, 3))) == pytest.approx([0.3] * 4)
    restored = load_gbdt(save_gbdt(model))
    assert restored.trees == [] and restored.base_score == model.base_score


def test_fit_is_deterministic(rng):
    x = rng.normal(size=(60, 5))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    cfg = GbdtConfig(max_rounds=20)
    assert save_gbdt(gbdt_fit(x, y, cfg=cfg)) == save_gbdt(gbdt_fit(x, y, cfg=cfg))


def test_fit_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        gbdt_fit(np.zeros((3, 1)), [1, 1, 1])
    with pytest.raises(DegenerateValidation):
        gbdt_fit(np.arange(4.0).reshape(4, 1), [0, 1, 0, 1], np.zeros((2, 1)), [0, 0])
    with pytest.raises(DegenerateInput):
        gbdt_fit(np.array([[np.nan], [1.0]]), [0, 1])


def test_predict_feature_count_mismatch():
    model = gbdt_fit(XOR_X, XOR_Y, cfg=GbdtConfig(max_rounds=2))
    with pytest.raises(DegenerateInput):
        gbdt_predict(model, np.zeros((1, 3)))


def test_model_file_round_trip(tmp_path, rng):
    x = rng.normal(size=(40, 3))
    y = (x[:, 2] > 0).astype(int)
    model = gbdt_fit(x, y, x[:20], y[:20], GbdtConfig(max_rounds=10))
    path = tmp_path / "model.sgbt"
    save_model_file(model, path)
    restored = load_model_file(path)
    assert np.array_equal(gbdt_predict(model, x), gbdt_predict(restored, x))
    assert restored.best_round == model.best_round
    assert restored.config == model.config


def test_load_gbdt_rejects_corrupt_files():
    data = save_gbdt(gbdt_fit(XOR_X, XOR_Y, cfg=GbdtConfig(max_rounds=2)))
    with pytest.raises(FormatError):
        load_gbdt(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_gbdt(data[:-3])
    with pytest.raises(FormatError):
        load_gbdt(data + b"\x00")


# Spectrum baselines


def test_binned_baseline_scores(synth_records):
    train = _split(synth_records("chimera", n=60, seed=0))
    valid = _split(synth_records("chimera", n=30, seed=1))
    test_spectra, _ = _split(synth_records("chimera", n=20, seed=2))
    result = binned_baseline(train, valid, test_spectra, cfg=GbdtConfig(max_rounds=20))
    assert result.scores.shape == (20,)
    assert np.all((result.scores > 0) & (result.scores < 1))
    assert result.model.n_features == 100


def test_bin_resolution_sweep(synth_records):
    train = _split(synth_records("quality", n=60, seed=0))
    valid = _split(synth_records("quality", n=30, seed=1))
    test = _split(synth_records("quality", n=30, seed=2))
    results = bin_resolution_sweep(train, valid, test, [50, 200], cfg=GbdtConfig(max_rounds=10))
    assert list(results) == [50, 200]
    assert all(0.0 <= v <= 1.0 for v in results.values())
    lines = write_bin_sweep(results).splitlines()
    assert lines[0] == "n_bins\tbin_width\tauroc"
    assert lines[1].startswith("50\t37.2000\t")


@slow
def test_glyco_oxonium_baselines():
    """Default O-glycan rate: the 54-ion trees never rank worse than the 138/144 ratio"""
    train = _split(gen_dataset(SynthConfig(task="glyco", n=5000, seed=0)))
    valid = _split(gen_dataset(SynthConfig(task="glyco", n=1500, seed=1)))
    test_spectra, test_labels = _split(gen_dataset(SynthConfig(task="glyco", n=5000, seed=2)))
    assert sum(test_labels) / len(test_labels) == pytest.approx(0.102, abs=0.015)
    ratio = auroc(oxonium_baselines("ratio", test_spectra).scores, test_labels)
    gbdt = auroc(oxonium_baselines("gbdt54", test_spectra, train, valid).scores, test_labels)
    assert ratio > 0.95
    assert gbdt >= ratio


def test_glyco_oxonium_baselines_small(synth_records):
    train = _split(synth_records("glyco", n=800, seed=0))
    valid = _split(synth_records("glyco", n=400, seed=1))
    test_spectra, test_labels = _split(synth_records("glyco", n=600, seed=2))
    ratio = auroc(oxonium_baselines("ratio", test_spectra).scores, test_labels)
    gbdt = auroc(oxonium_baselines("gbdt54", test_spectra, train, valid).scores, test_labels)
    assert ratio > 0.95
    assert gbdt >= ratio


def test_core2_glycans_look_n_like(synth_records):
    def o_class_ratio(**overrides):
        spectra, labels = _split(synth_records("glyco", n=600, seed=2, **overrides))
        return oxonium_baselines("ratio", spectra).scores[np.asarray(labels) == 1].mean()

    assert o_class_ratio(core2_rate=1.0) < o_class_ratio()


@slow
def test_binned_baseline_glyco():
    train = _split(gen_dataset(SynthConfig(task="glyco", n=5000, seed=0)))
    valid = _split(gen_dataset(SynthConfig(task="glyco", n=1500, seed=1)))
    test_spectra, test_labels = _split(gen_dataset(SynthConfig(task="glyco", n=5000, seed=2)))
    result = binned_baseline(train, valid, test_spectra)
    assert auroc(result.scores, test_labels) > 0.8


def test_oxonium_baseline_modes(sample_spectrum):
    with pytest.raises(DegenerateInput):
        oxonium_baselines("gbdt54", [sample_spectrum])
    with pytest.raises(DegenerateInput):
        oxonium_baselines("nearest", [sample_spectrum])
    assert oxonium_baselines("ratio", []).scores.shape == (0,)
