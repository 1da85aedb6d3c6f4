"""Tests for the head, end-to-end, pre-training and multi-task training loops"""

import copy
import math

import numpy as np
import pytest
import torch

from specfm.config import DecoderConfig, EncoderConfig, MultitaskConfig, SynthConfig, TrainConfig
from specfm.denovo import DenovoModel, aa_accuracy
from specfm.encoder import SpectrumEncoder, collate
from specfm.errors import ConfigError, DegenerateValidation, NumericError
from specfm.heads import DenseHead, bce_smoothed
from specfm.metrics import auroc, learning_curve
from specfm.schemas import ValidationEvent
from specfm.synthgen import gen_dataset
from specfm.trainer import (
    LOG_HEADER,
    CyclingLoader,
    DenovoData,
    TaskData,
    downsample,
    finetune_multitask,
    multitask_step_losses,
    predict_head,
    predict_spectra,
    pretrain_denovo,
    select_layer_count,
    task_weights,
    train_end_to_end,
    train_head,
    write_training_log,
)

from .conftest import slow


def _separable(rng, n):
    labels = np.arange(n) % 2
    centers = np.where(labels[:, None] == 1, 2.0, -2.0)
    return centers + rng.normal(scale=0.5, size=(n, 2)), labels


def _task_data(synth_records, task, n, seed):
    records = synth_records(task, n=n, seed=seed)
    return TaskData.build([r.spectrum for r in records], [r.provenance.label for r in records])


def _records(task, n, seed):
    return gen_dataset(SynthConfig(task=task, n=n, seed=seed))


def _labels(records):
    return [r.provenance.label for r in records]


def _spectra(records):
    return [r.spectrum for r in records]


def _frozen_head_auroc(encoder, train, valid, test, seed=0):
    """Test AUROC of a dense head fit on the encoder's frozen embeddings"""

    def embed(records):
        return encoder.embed(_spectra(records)).data

    result = train_head(embed(train), _labels(train), embed(valid), _labels(valid), TrainConfig(lr=1e-3, seed=seed))
    return auroc(predict_head(result.head, embed(test)), _labels(test))


@pytest.fixture(scope="module")
def pretrained_denovo():
    """Desk-scale de novo pre-trained encoder-decoder shared by the slow comparisons"""
    train = DenovoData.build(_spectra(_records("denovo", 20_000, 10)))
    valid = DenovoData.build(_spectra(_records("denovo", 500, 11)))
    torch.manual_seed(0)
    model = DenovoModel(EncoderConfig(), DecoderConfig())
    cfg = TrainConfig(lr=5e-4, label_smoothing=0.0, max_steps=3000, warmup_steps=200, validate_every=500)
    return pretrain_denovo(model, train, valid, cfg).model


# Loaders


def test_cycling_loader_covers_every_index():
    loader = CyclingLoader(7, 3, seed=0)
    first_pass = [next(loader) for _ in range(2)]
    assert loader.epoch == 1
    seen = sorted(i for batch in first_pass for i in batch)
    assert len(seen) == 6 and len(set(seen)) == 6
    next(loader)
    assert loader.epoch == 2


def test_cycling_loader_caps_batch_and_rejects_empty():
    assert len(next(CyclingLoader(2, 32, seed=0))) == 2
    with pytest.raises(ConfigError):
        CyclingLoader(0, 4, seed=0)


def test_downsample(synth_records):
    data = _task_data(synth_records, "phospho", 9, 0)
    assert len(downsample(data, 1, 0)) == len(data)
    half = downsample(data, 2, 0)
    assert len(half) == math.ceil(len(data) / 2)
    assert half.labels.tolist() == downsample(data, 2, 0).labels.tolist()


def test_task_data_label_count_mismatch(sample_spectrum):
    from specfm.preprocess import preprocess_spectrum

    with pytest.raises(ConfigError):
        TaskData([preprocess_spectrum(sample_spectrum)], [0, 1])


# Frozen-embedding heads


def test_train_head_separable(rng):
    x, y = _separable(rng, 200)
    xv, yv = _separable(rng, 60)
    cfg = TrainConfig(lr=1e-2, batch_size=16, max_epochs=50, patience_epochs=3)
    result = train_head(x, y, xv, yv, cfg)
    assert result.best_auroc == 1.0
    assert result.stopped_epoch == result.best_epoch + cfg.patience_epochs
    probs = predict_head(result.head, xv)
    assert probs.shape == (60,)
    assert np.all((probs >= 0) & (probs <= 1))


def test_train_head_deterministic(rng):
    x, y = _separable(rng, 40)
    xv, yv = _separable(rng, 20)
    cfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=3)
    a = train_head(x, y, xv, yv, cfg)
    b = train_head(x, y, xv, yv, cfg)
    assert a.history == b.history
    assert np.array_equal(predict_head(a.head, xv), predict_head(b.head, xv))


def test_train_head_shuffled_labels_near_chance(rng):
    x, y = _separable(rng, 400)
    xv, yv = _separable(rng, 1000)
    xt, yt = _separable(rng, 2000)
    cfg = TrainConfig(lr=1e-2, batch_size=32, max_epochs=20, patience_epochs=3)
    result = train_head(x, rng.permutation(y), xv, rng.permutation(yv), cfg)
    assert 0.4 <= auroc(predict_head(result.head, xt), rng.permutation(yt)) <= 0.6


def test_train_head_single_class_validation(rng):
    x, y = _separable(rng, 20)
    with pytest.raises(DegenerateValidation):
        train_head(x, y, x[:4], np.ones(4, dtype=int))


def test_train_head_non_finite_embeddings(rng):
    x, y = _separable(rng, 20)
    xv, yv = _separable(rng, 8)
    x[3, 1] = np.nan
    with pytest.raises(NumericError):
        train_head(x, y, xv, yv)


# End-to-end


@pytest.mark.parametrize(
    "scores, expected",
    [({1: 0.8, 2: 0.9, 3: 0.85}, 2), ({3: 0.9, 1: 0.9, 2: 0.7}, 1), ({4: 0.5}, 4)],
)
def test_select_layer_count(scores, expected):
    assert select_layer_count(scores) == expected


def test_select_layer_count_empty():
    with pytest.raises(ConfigError):
        select_layer_count({})


def test_end_to_end_layer_sweep(synth_records, small_encoder_cfg):
    train = _task_data(synth_records, "phospho", 24, 0)
    valid = _task_data(synth_records, "phospho", 12, 1)
    cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=2, layer_sweep=[1, 2])
    result = train_end_to_end(train, valid, small_encoder_cfg, cfg)
    assert set(result.sweep) == {1, 2}
    assert result.n_layers == select_layer_count(result.sweep)
    assert result.best_auroc == result.sweep[result.n_layers]


def test_end_to_end_frozen_encoder(synth_records, small_encoder_cfg):
    train = _task_data(synth_records, "chimera", 16, 0)
    valid = _task_data(synth_records, "chimera", 12, 1)
    cfg = TrainConfig(lr=1e-2, batch_size=8, max_epochs=2, seed=5)
    result = train_end_to_end(train, valid, small_encoder_cfg, cfg, freeze_encoder=True)
    torch.manual_seed(cfg.seed)
    fresh = SpectrumEncoder(small_encoder_cfg)
    for (name, a), (_, b) in zip(fresh.state_dict().items(), result.encoder.state_dict().items()):
        assert torch.equal(a, b), name


def test_end_to_end_parameters_reproducible(synth_records, small_encoder_cfg):
    train = _task_data(synth_records, "phospho", 24, 0)
    valid = _task_data(synth_records, "phospho", 12, 1)
    cfg = TrainConfig(lr=1e-3, batch_size=8, max_epochs=2, seed=3)
    a = train_end_to_end(train, valid, small_encoder_cfg, cfg)
    b = train_end_to_end(train, valid, small_encoder_cfg, cfg)
    for (name, p), (_, q) in zip(a.encoder.state_dict().items(), b.encoder.state_dict().items()):
        assert torch.equal(p, q), name
    for p, q in zip(a.head.parameters(), b.head.parameters()):
        assert torch.equal(p, q)


def test_end_to_end_learns_phospho(synth_records):
    train = _task_data(synth_records, "phospho", 800, 0)
    valid = _task_data(synth_records, "phospho", 200, 1)
    encoder_cfg = EncoderConfig(d_model=32, n_layers=1, n_heads=2)
    cfg = TrainConfig(lr=1e-3, max_epochs=15, patience_epochs=4)
    assert train_end_to_end(train, valid, encoder_cfg, cfg).best_auroc > 0.75


@slow
def test_end_to_end_phospho_desk_scale(synth_records):
    train = _task_data(synth_records, "phospho", 4000, 0)
    valid = _task_data(synth_records, "phospho", 800, 1)
    encoder_cfg = EncoderConfig(d_model=64, n_layers=2, n_heads=4)
    result = train_end_to_end(train, valid, encoder_cfg, TrainConfig(lr=1e-3, max_epochs=20))
    assert result.best_auroc > 0.9


@slow
def test_frozen_random_encoder_below_full_training(synth_records):
    train = _task_data(synth_records, "phospho", 2000, 0)
    valid = _task_data(synth_records, "phospho", 400, 1)
    cfg = TrainConfig(lr=1e-3, max_epochs=20)
    full = train_end_to_end(train, valid, EncoderConfig(), cfg)
    frozen = train_end_to_end(train, valid, EncoderConfig(), cfg, freeze_encoder=True)
    assert frozen.best_auroc < full.best_auroc


@slow
def test_pretrained_embeddings_beat_scratch_with_few_labels(pretrained_denovo):
    """500 labeled phospho spectra: frozen pre-trained embeddings + head vs end-to-end from scratch, 3 paired seeds"""
    train, valid, test = _records("phospho", 500, 12), _records("phospho", 300, 13), _records("phospho", 1000, 14)
    encoder = pretrained_denovo.encoder
    train_emb, valid_emb, test_emb = (encoder.embed(_spectra(r)).data for r in (train, valid, test))
    train_data, valid_data, test_data = (TaskData.build(_spectra(r), _labels(r)) for r in (train, valid, test))
    train_labels = np.asarray(_labels(train))

    def frozen(seed):
        def fit(indices):
            cfg = TrainConfig(lr=1e-3, seed=seed)
            result = train_head(train_emb[indices], train_labels[indices], valid_emb, _labels(valid), cfg)
            return predict_head(result.head, test_emb)

        return fit

    def scratch(seed):
        def fit(indices):
            cfg = TrainConfig(lr=1e-3, max_epochs=30, seed=seed)
            result = train_end_to_end(train_data.subset(indices), valid_data, EncoderConfig(), cfg)
            return predict_spectra(result.encoder, result.head, test_data.spectra)

        return fit

    methods = {**{f"frozen_{s}": frozen(s) for s in range(3)}, **{f"scratch_{s}": scratch(s) for s in range(3)}}
    rows = learning_curve(train_labels, methods, lambda scores: auroc(scores, test_data.labels), n_subsets=1)
    assert {row["train_size"] for row in rows} == {500}
    mean = {
        kind: np.mean([row["auroc"] for row in rows if row["method"].startswith(kind)]) for kind in ("frozen", "scratch")
    }
    assert mean["frozen"] - mean["scratch"] > 0


# De novo pre-training


def test_pretrain_validation_events(synth_records, small_encoder_cfg):
    train = DenovoData.build([r.spectrum for r in synth_records("denovo", n=12, seed=0)])
    valid = DenovoData.build([r.spectrum for r in synth_records("denovo", n=6, seed=1)])
    torch.manual_seed(0)
    model = DenovoModel(small_encoder_cfg, DecoderConfig(n_layers=1, n_heads=2))
    seen = []
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_steps=5, validate_every=2, label_smoothing=0.0)
    result = pretrain_denovo(model, train, valid, cfg, on_event=seen.append)
    assert [e.step for e in result.events] == [2, 4, 5]
    assert seen == result.events
    assert all(e.task == "denovo" and e.auroc is None for e in seen)
    assert result.best_loss == min(e.loss for e in seen)
    assert result.best_step in (2, 4, 5)


# Multi-task


def _multitask_data(synth_records, n, seed):
    return {task: _task_data(synth_records, task, n, seed) for task in ("quality", "chimera", "phospho")}


def test_multitask_step_loss_is_weighted_sum(synth_records, small_encoder_cfg):
    torch.manual_seed(0)
    model = DenovoModel(small_encoder_cfg, DecoderConfig(n_layers=1, n_heads=2))
    model.eval()
    heads = {t: DenseHead(16) for t in ("quality", "chimera", "phospho")}
    data = _multitask_data(synth_records, 6, 0)
    denovo = DenovoData.build([r.spectrum for r in synth_records("denovo", n=4, seed=0)])
    task_batches = {t: (d.spectra, d.labels) for t, d in data.items()}
    weights = task_weights(MultitaskConfig())
    with torch.no_grad():
        losses = multitask_step_losses(model, heads, task_batches, (denovo.spectra, denovo.peptides), weights)
        separate = {}
        for task, (spectra, labels) in task_batches.items():
            _, pooled = model.encoder(collate(spectra))
            separate[task] = float(bce_smoothed(heads[task](pooled), torch.as_tensor(labels), 0.0))
        separate["denovo"] = float(model.loss(collate(denovo.spectra), denovo.peptides))
    for task, value in separate.items():
        assert float(losses[task]) == pytest.approx(value, abs=1e-6)
    assert float(losses["total"]) == pytest.approx(sum(separate.values()), abs=1e-6)


def test_multitask_weights_scale_total(synth_records, small_encoder_cfg):
    torch.manual_seed(0)
    model = DenovoModel(small_encoder_cfg, DecoderConfig(n_layers=1, n_heads=2))
    model.eval()
    heads = {t: DenseHead(16) for t in ("quality", "chimera", "phospho")}
    data = _multitask_data(synth_records, 6, 0)
    denovo = DenovoData.build([r.spectrum for r in synth_records("denovo", n=4, seed=0)])
    task_batches = {t: (d.spectra, d.labels) for t, d in data.items()}
    weights = task_weights(MultitaskConfig(weight_denovo=0.0, weight_chimera=2.0))
    with torch.no_grad():
        losses = multitask_step_losses(model, heads, task_batches, (denovo.spectra, denovo.peptides), weights)
    expected = float(losses["quality"]) + 2 * float(losses["chimera"]) + float(losses["phospho"])
    assert float(losses["total"]) == pytest.approx(expected, abs=1e-6)


def test_finetune_multitask_short_run(synth_records, small_encoder_cfg):
    torch.manual_seed(0)
    model = DenovoModel(small_encoder_cfg, DecoderConfig(n_layers=1, n_heads=2))
    train = _multitask_data(synth_records, 12, 0)
    valid = _multitask_data(synth_records, 12, 1)
    denovo_train = DenovoData.build([r.spectrum for r in synth_records("denovo", n=8, seed=0)])
    denovo_valid = DenovoData.build([r.spectrum for r in synth_records("denovo", n=4, seed=1)])
    cfg = MultitaskConfig(lr=1e-3, batch_size=4, max_steps=3, validate_every=2, warmup_steps=0, cosine_half_period=0)
    result = finetune_multitask(model, train, valid, denovo_train, denovo_valid, cfg)
    assert sorted({e.step for e in result.events}) == [0, 2, 3]
    assert sum(e.task == "denovo" for e in result.events) == 3
    assert result.selected_step in (0, 2, 3)
    assert result.selected_loss <= result.initial_loss
    assert set(result.heads) == {"quality", "chimera", "phospho"}


def test_finetune_multitask_parameters_reproducible(synth_records, small_encoder_cfg):
    train = _multitask_data(synth_records, 12, 0)
    valid = _multitask_data(synth_records, 12, 1)
    denovo = DenovoData.build([r.spectrum for r in synth_records("denovo", n=8, seed=0)])
    cfg = MultitaskConfig(lr=1e-3, batch_size=4, max_steps=3, validate_every=2, warmup_steps=0, cosine_half_period=0, seed=7)

    def run():
        torch.manual_seed(0)
        model = DenovoModel(small_encoder_cfg, DecoderConfig(n_layers=1, n_heads=2))
        return finetune_multitask(model, train, valid, denovo, cfg=cfg)

    a, b = run(), run()
    for (name, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(p, q), name
    for task in a.heads:
        for p, q in zip(a.heads[task].parameters(), b.heads[task].parameters()):
            assert torch.equal(p, q), task


def test_finetune_at_zero_lr_keeps_denovo_accuracy(synth_records, small_encoder_cfg):
    torch.manual_seed(0)
    model = DenovoModel(small_encoder_cfg, DecoderConfig(n_layers=1, n_heads=2))
    denovo = DenovoData.build([r.spectrum for r in synth_records("denovo", n=8, seed=2)])

    def accuracy():
        model.eval()
        predicted = model.decode(collate(denovo.spectra))
        return [aa_accuracy(p, truth) for p, truth in zip(predicted, denovo.peptides)]

    before = accuracy()
    params = copy.deepcopy(model.state_dict())
    cfg = MultitaskConfig(lr=0.0, batch_size=4, max_steps=3, validate_every=2, warmup_steps=0, cosine_half_period=0)
    train = _multitask_data(synth_records, 12, 0)
    result = finetune_multitask(model, train, _multitask_data(synth_records, 12, 1), denovo, cfg=cfg)
    assert result.selected_step == 0
    assert accuracy() == before
    for name, value in model.state_dict().items():
        assert torch.equal(params[name], value), name


@slow
def test_multitask_keeps_frozen_head_quality(pretrained_denovo):
    tasks = ("quality", "chimera", "phospho")
    train = {t: _records(t, 2000, 20) for t in tasks}
    valid = {t: _records(t, 500, 21) for t in tasks}
    test = {t: _records(t, 1000, 22) for t in tasks}
    model = copy.deepcopy(pretrained_denovo)
    before = {t: _frozen_head_auroc(model.encoder, train[t], valid[t], test[t]) for t in tasks}

    denovo = DenovoData.build(_spectra(_records("denovo", 2000, 23)))
    cfg = MultitaskConfig(lr=1e-4, warmup_steps=50, cosine_half_period=0, max_steps=600, validate_every=100)
    result = finetune_multitask(
        model,
        {t: TaskData.build(_spectra(r), _labels(r)) for t, r in train.items()},
        {t: TaskData.build(_spectra(r), _labels(r)) for t, r in valid.items()},
        denovo,
        cfg=cfg,
    )
    assert result.selected_loss <= result.initial_loss
    for t in tasks:
        assert _frozen_head_auroc(result.model.encoder, train[t], valid[t], test[t]) >= before[t] - 0.01, t


def test_finetune_multitask_missing_task(synth_records, small_encoder_cfg):
    model = DenovoModel(small_encoder_cfg, DecoderConfig(n_layers=1, n_heads=2))
    train = _multitask_data(synth_records, 8, 0)
    del train["chimera"]
    denovo = DenovoData.build([r.spectrum for r in synth_records("denovo", n=4, seed=0)])
    with pytest.raises(ConfigError, match="chimera"):
        finetune_multitask(model, train, _multitask_data(synth_records, 8, 1), denovo)


def test_write_training_log():
    events = [
        ValidationEvent(step=0, task="quality", split="valid", loss=0.5, auroc=0.75),
        ValidationEvent(step=0, task="denovo", split="valid", loss=2.0),
    ]
    lines = write_training_log(events).splitlines()
    assert lines[0] == LOG_HEADER
    assert lines[1] == "0\tquality\tvalid\t0.500000\t0.750000"
    assert lines[2] == "0\tdenovo\tvalid\t2.000000\t"
