"""Training commands: de novo pre-training, heads, end-to-end, baselines and multi-task fine-tuning"""

import logging
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from ..baselines import (
    bin_resolution_sweep,
    binned_baseline,
    oxonium_baselines,
    save_gbdt,
    write_bin_sweep,
)
from ..denovo import DenovoModel, Vocabulary, denovo_checkpoint, restore_denovo
from ..encoder import save_checkpoint
from ..errors import ConfigError
from ..heads import head_checkpoint, head_state
from ..manifest import write_manifest
from ..ms_io import load_embeddings, write_scores
from ..preprocess import load_oxonium_table
from ..schemas import Task
from ..trainer import (
    DOWNSTREAM_TASKS,
    DenovoData,
    TaskData,
    finetune_multitask,
    predict_head,
    predict_spectra,
    preprocess_all,
    pretrain_denovo,
    train_end_to_end,
    train_head,
    write_training_log,
)
from .common import (
    labeled_embeddings,
    labeled_spectra,
    load_label_file,
    read_many,
    resolve_config,
    split_list,
    write_bytes,
    write_text,
)

logger = logging.getLogger(__name__)

TASKS = [t.value for t in Task]
BASELINE_KINDS = ["binned", "oxonium-ratio", "oxonium-gbdt"]


def register(subparsers, parent) -> None:
    pretrain = subparsers.add_parser("pretrain-denovo", parents=[parent], help="pre-train encoder and decoder on de novo sequencing")
    pretrain.add_argument("--train", nargs="+", required=True, help="peptide-annotated MGF files")
    pretrain.add_argument("--valid", nargs="*", default=[], help="peptide-annotated validation MGF files")
    pretrain.add_argument("--out", required=True, help="output checkpoint path")
    pretrain.add_argument("--log", help="training log TSV path")
    pretrain.set_defaults(handler=run_pretrain_denovo)

    head = subparsers.add_parser("train-head", parents=[parent], help="train a dense head on frozen embeddings")
    head.add_argument("--task", choices=TASKS, required=True)
    head.add_argument("--emb", required=True, help="training embeddings (SEMB)")
    head.add_argument("--labels", required=True, help="label TSV covering the training rows")
    head.add_argument("--valid-emb", required=True, help="validation embeddings (SEMB)")
    head.add_argument("--valid-labels", help="validation label TSV (default --labels)")
    head.add_argument("--test-emb", help="embeddings to score")
    head.add_argument("--scores", help="output score TSV for --test-emb")
    head.add_argument("--out", required=True, help="output head checkpoint")
    head.set_defaults(handler=run_train_head)

    e2e = subparsers.add_parser("train-e2e", parents=[parent], help="train encoder and head from scratch")
    e2e.add_argument("--task", choices=TASKS, required=True)
    e2e.add_argument("--train", nargs="+", required=True, help="training spectrum files")
    e2e.add_argument("--labels", required=True, help="label TSV covering the training spectra")
    e2e.add_argument("--valid", nargs="+", required=True, help="validation spectrum files")
    e2e.add_argument("--valid-labels", help="validation label TSV (default --labels)")
    e2e.add_argument("--test", nargs="*", default=[], help="spectrum files to score")
    e2e.add_argument("--scores", help="output score TSV for --test")
    e2e.add_argument("--layer-sweep", help="comma-separated encoder layer counts to select from")
    e2e.add_argument("--freeze-encoder", action="store_true", help="keep the random encoder fixed, train only the head")
    e2e.add_argument("--out", required=True, help="output checkpoint")
    e2e.set_defaults(handler=run_train_e2e)

    baseline = subparsers.add_parser("train-baseline", parents=[parent], help="binned or oxonium baselines")
    baseline.add_argument("--kind", choices=BASELINE_KINDS, required=True)
    baseline.add_argument("--task", choices=TASKS, default="glyco")
    baseline.add_argument("--train", nargs="*", default=[], help="training spectrum files")
    baseline.add_argument("--labels", help="label TSV covering training (and by default validation/test) spectra")
    baseline.add_argument("--valid", nargs="*", default=[], help="validation spectrum files")
    baseline.add_argument("--valid-labels", help="validation label TSV (default --labels)")
    baseline.add_argument("--test", nargs="+", required=True, help="spectrum files to score")
    baseline.add_argument("--test-labels", help="test label TSV, needed by --bin-sweep")
    baseline.add_argument("--scores", required=True, help="output score TSV")
    baseline.add_argument("--out", help="output GBDT model (SGBT)")
    baseline.add_argument("--bin-sweep", help="comma-separated bin counts for a resolution sweep")
    baseline.add_argument("--sweep-out", help="output TSV for --bin-sweep")
    baseline.set_defaults(handler=run_train_baseline)

    multitask = subparsers.add_parser("finetune-multitask", parents=[parent], help="multi-task fine-tuning")
    multitask.add_argument("--checkpoint", help="pre-trained de novo checkpoint (default: fresh model)")
    for task in DOWNSTREAM_TASKS:
        multitask.add_argument(f"--{task}", nargs=2, required=True, metavar=("SPECTRA", "LABELS"))
    multitask.add_argument("--denovo", nargs="+", required=True, help="peptide-annotated MGF files")
    multitask.add_argument("--valid-fraction", type=float, default=0.1, help="held-out fraction per task")
    multitask.add_argument("--log", help="training log TSV path")
    multitask.add_argument("--out", required=True, help="output checkpoint with encoder, decoder and heads")
    multitask.set_defaults(handler=run_finetune_multitask)


def _vocabulary(cfg) -> Vocabulary:
    return Vocabulary.from_tsv(cfg.decoder.vocabulary) if cfg.decoder.vocabulary else Vocabulary.default()


def run_pretrain_denovo(args) -> None:
    """Pre-train a DenovoModel on peptide-annotated spectra"""
    cfg = resolve_config(args)
    train = DenovoData.build(read_many(args.train), cfg.preprocess)
    valid = DenovoData.build(read_many(args.valid), cfg.preprocess) if args.valid else None
    torch.manual_seed(cfg.pretrain.seed)
    model = DenovoModel(cfg.encoder, cfg.decoder, _vocabulary(cfg))
    result = pretrain_denovo(model, train, valid, cfg.pretrain)
    write_bytes(args.out, denovo_checkpoint(result.model))
    if args.log:
        write_text(args.log, write_training_log(result.events))
    write_manifest(args.out, "pretrain-denovo", cfg, cfg.pretrain.seed, [*args.train, *args.valid])


def run_train_head(args) -> None:
    """Fit a dense head on frozen embeddings, optionally scoring test embeddings"""
    cfg = resolve_config(args)
    train_records = load_label_file(args.labels)
    valid_records = load_label_file(args.valid_labels) if args.valid_labels else train_records
    x, y, _ = labeled_embeddings(load_embeddings(args.emb), train_records, args.task)
    xv, yv, _ = labeled_embeddings(load_embeddings(args.valid_emb), valid_records, args.task)
    result = train_head(x, y, xv, yv, cfg.head)
    write_bytes(args.out, head_checkpoint({args.task: result.head}))
    inputs = [args.emb, args.labels, args.valid_emb]
    if args.test_emb:
        if not args.scores:
            raise ConfigError("--test-emb needs --scores")
        test = load_embeddings(args.test_emb)
        write_text(args.scores, write_scores(test.rows, predict_head(result.head, test.data)))
        inputs.append(args.test_emb)
    write_manifest(args.out, "train-head", cfg, cfg.head.seed, inputs)


def run_train_e2e(args) -> None:
    """Train an encoder and head jointly, optionally sweeping the layer count"""
    cfg = resolve_config(args, {"e2e.layer_sweep": split_list(args.layer_sweep)})
    spectra, labels = labeled_spectra(args.train, args.labels, args.task)
    valid_spectra, valid_labels = labeled_spectra(args.valid, args.valid_labels or args.labels, args.task)
    train = TaskData.build(spectra, labels, cfg.preprocess)
    valid = TaskData.build(valid_spectra, valid_labels, cfg.preprocess)
    result = train_end_to_end(train, valid, cfg.encoder, cfg.e2e, freeze_encoder=args.freeze_encoder)

    state = OrderedDict((f"encoder.{k}", v) for k, v in result.encoder.state_dict().items())
    heads, heads_config = head_state({args.task: result.head})
    state.update(heads)
    config = {"encoder": result.encoder.config.model_dump(), **heads_config}
    if result.sweep:
        config["layer_sweep"] = {str(n): score for n, score in result.sweep.items()}
    write_bytes(args.out, save_checkpoint(state, config))

    if args.test:
        if not args.scores:
            raise ConfigError("--test needs --scores")
        test_spectra = read_many(args.test)
        processed, kept = preprocess_all(test_spectra, cfg.preprocess)
        scores = predict_spectra(result.encoder, result.head, processed, cfg.e2e.batch_size)
        write_text(args.scores, write_scores([test_spectra[i].key for i in kept], scores))
    write_manifest(args.out, "train-e2e", cfg, cfg.e2e.seed, [*args.train, args.labels, *args.valid, *args.test])


def run_train_baseline(args) -> None:
    """Binned-peak GBDT, oxonium-ratio or 54-ion oxonium GBDT scoring"""
    cfg = resolve_config(args)
    test_spectra = read_many(args.test)
    inputs = list(args.test)
    if args.kind == "oxonium-ratio":
        result = oxonium_baselines("ratio", test_spectra, preprocess_cfg=cfg.preprocess)
    else:
        if not (args.train and args.valid and args.labels):
            raise ConfigError(f"--kind {args.kind} needs --train, --valid and --labels")
        train = labeled_spectra(args.train, args.labels, args.task)
        valid = labeled_spectra(args.valid, args.valid_labels or args.labels, args.task)
        inputs += [*args.train, *args.valid, args.labels]
        if args.kind == "binned":
            result = binned_baseline(train, valid, test_spectra, cfg.preprocess, cfg.gbdt)
        else:
            table = load_oxonium_table(cfg.preprocess.oxonium_table)
            result = oxonium_baselines("gbdt54", test_spectra, train, valid, table, cfg.preprocess, cfg.gbdt)
        if args.bin_sweep:
            if not args.sweep_out:
                raise ConfigError("--bin-sweep needs --sweep-out")
            test = labeled_spectra(args.test, args.test_labels or args.labels, args.task)
            sweep = bin_resolution_sweep(train, valid, test, split_list(args.bin_sweep), cfg.preprocess, cfg.gbdt)
            write_text(args.sweep_out, write_bin_sweep(sweep, cfg.preprocess))
    write_text(args.scores, write_scores([s.key for s in test_spectra], result.scores))
    if args.out and result.model is not None:
        write_bytes(args.out, save_gbdt(result.model))
    write_manifest(args.scores, "train-baseline", cfg, None, inputs)


def _split(data: TaskData, fraction: float, seed: int):
    if not 0 < fraction < 1:
        raise ConfigError(f"--valid-fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    n_valid = max(1, math.ceil(fraction * len(data)))
    return data.subset(np.sort(order[n_valid:])), data.subset(np.sort(order[:n_valid]))


def run_finetune_multitask(args) -> None:
    """Fine-tune encoder, decoder and three task heads jointly"""
    cfg = resolve_config(args)
    seed = cfg.multitask.seed
    if args.checkpoint:
        model = restore_denovo(Path(args.checkpoint).read_bytes())
    else:
        torch.manual_seed(seed)
        model = DenovoModel(cfg.encoder, cfg.decoder, _vocabulary(cfg))
    train, valid = {}, {}
    inputs = [args.checkpoint] if args.checkpoint else []
    for i, task in enumerate(DOWNSTREAM_TASKS):
        spectra_path, labels_path = getattr(args, task)
        spectra, labels = labeled_spectra([spectra_path], labels_path, task)
        train[task], valid[task] = _split(TaskData.build(spectra, labels, cfg.preprocess), args.valid_fraction, seed + i)
        inputs += [spectra_path, labels_path]
    denovo = DenovoData.build(read_many(args.denovo), cfg.preprocess)
    inputs += list(args.denovo)

    result = finetune_multitask(model, train, valid, denovo, None, cfg.multitask)
    heads, heads_config = head_state(result.heads)
    write_bytes(args.out, denovo_checkpoint(result.model, heads, heads_config))
    if args.log:
        write_text(args.log, write_training_log(result.events))
    logger.info(
        f"Selected step {result.selected_step}: mean validation loss {result.selected_loss:.4f} "
        f"(step 0: {result.initial_loss:.4f})"
    )
    write_manifest(args.out, "finetune-multitask", cfg, seed, inputs)
