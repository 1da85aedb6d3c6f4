"""Analysis commands: metrics, PCA projection and learning curves"""

import logging
from pathlib import Path
from typing import Dict

import numpy as np

from ..baselines import gbdt_fit, gbdt_predict
from ..encoder import embed_spectra, restore_encoder
from ..errors import ConfigError
from ..manifest import write_manifest
from ..metrics import (
    Method,
    auroc,
    evaluate_scores,
    learning_curve,
    pca,
    pr_points,
    roc_points,
    write_learning_curve,
    write_metrics_json,
    write_pca_csv,
    write_pr_csv,
    write_roc_csv,
)
from ..ms_io import load_embeddings, read_scores, read_text
from ..preprocess import bin_spectra
from ..schemas import Task
from ..trainer import TaskData, predict_head, predict_spectra, preprocess_all, train_end_to_end, train_head
from .common import infer_task, labeled_spectra, load_label_file, resolve_config, write_text

logger = logging.getLogger(__name__)

TASKS = [t.value for t in Task]
CURVE_METHODS = ["frozen", "scratch", "binned"]


def register(subparsers, parent) -> None:
    evaluate = subparsers.add_parser("eval", parents=[parent], help="AUROC, AUPR and F1 of a score file")
    evaluate.add_argument("--scores", required=True, help="score TSV")
    evaluate.add_argument("--labels", required=True, help="label TSV")
    evaluate.add_argument("--task", choices=TASKS, help="task to evaluate (default: the only task in --labels)")
    evaluate.add_argument("--threshold", type=float, default=0.5, help="F1 decision threshold")
    evaluate.add_argument("--json", required=True, help="output metrics JSON")
    evaluate.add_argument("--roc", help="output ROC CSV")
    evaluate.add_argument("--pr", help="output precision-recall CSV")
    evaluate.set_defaults(handler=run_eval)

    projection = subparsers.add_parser("pca", parents=[parent], help="principal components of embeddings")
    projection.add_argument("--emb", required=True, help="embeddings (SEMB)")
    projection.add_argument("--labels", help="label TSV used to color rows")
    projection.add_argument("--task", choices=TASKS, help="task whose labels are attached")
    projection.add_argument("--k", type=int, default=2, help="number of components")
    projection.add_argument("--out", required=True, help="output CSV")
    projection.set_defaults(handler=run_pca)

    curve = subparsers.add_parser("learning-curve", parents=[parent], help="AUROC over nested training subsets")
    curve.add_argument("--task", choices=TASKS, required=True)
    curve.add_argument("--train", nargs="+", required=True, help="training spectrum files")
    curve.add_argument("--valid", nargs="+", required=True, help="validation spectrum files")
    curve.add_argument("--test", nargs="+", required=True, help="test spectrum files")
    curve.add_argument("--labels", required=True, help="label TSV covering train, validation and test spectra")
    curve.add_argument("--checkpoint", help="pre-trained encoder for the frozen method")
    curve.add_argument("--methods", default="frozen,scratch,binned", help="comma-separated subset of frozen,scratch,binned")
    curve.add_argument("--subsets", type=int, default=10, help="number of nested subsets")
    curve.add_argument("--out", required=True, help="output TSV")
    curve.set_defaults(handler=run_learning_curve)


def run_eval(args) -> None:
    """Join scores to labels and write the metrics JSON and curves"""
    cfg = resolve_config(args)
    records = load_label_file(args.labels)
    task = infer_task(records, args.task)
    scores = read_scores(read_text(args.scores))
    paired = [(scores[(r.run_id, r.scan_id)], r.label) for r in records if r.task == task and (r.run_id, r.scan_id) in scores]
    missing = sum(1 for r in records if r.task == task) - len(paired)
    if missing:
        logger.warning(f"{missing} labelled spectra have no score")
    values = np.asarray([s for s, _ in paired], dtype=np.float64)
    labels = np.asarray([y for _, y in paired], dtype=np.int64)
    report = evaluate_scores(task.value, values, labels, args.threshold)
    write_text(args.json, write_metrics_json(report))
    if args.roc:
        write_text(args.roc, write_roc_csv(roc_points(values, labels)))
    if args.pr:
        write_text(args.pr, write_pr_csv(pr_points(values, labels)))
    logger.info(f"{task.value}: auroc {report.auroc:.4f}, aupr {report.aupr:.4f}, f1 {report.f1:.4f}")
    write_manifest(args.json, "eval", cfg, None, [args.scores, args.labels])


def run_pca(args) -> None:
    """Project embeddings on their top principal components"""
    cfg = resolve_config(args)
    matrix = load_embeddings(args.emb)
    labels = None
    inputs = [args.emb]
    if args.labels:
        records = load_label_file(args.labels)
        task = infer_task(records, args.task)
        lookup = {(r.run_id, r.scan_id): r.label for r in records if r.task == task}
        labels = [lookup.get(row) for row in matrix.rows]
        inputs.append(args.labels)
    result = pca(matrix.data, args.k)
    write_text(args.out, write_pca_csv(result, [scan_id for _, scan_id in matrix.rows], labels))
    write_manifest(args.out, "pca", cfg, None, inputs)


def run_learning_curve(args) -> None:
    """Train each method on nested subsets of the training data and score the test set"""
    cfg = resolve_config(args)
    methods_requested = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = sorted(set(methods_requested) - set(CURVE_METHODS))
    if unknown:
        raise ConfigError(f"Unknown learning-curve methods {unknown}")
    if "frozen" in methods_requested and not args.checkpoint:
        raise ConfigError("The frozen method needs --checkpoint")

    raw_train, train_labels = labeled_spectra(args.train, args.labels, args.task)
    raw_valid, valid_labels = labeled_spectra(args.valid, args.labels, args.task)
    raw_test, test_labels = labeled_spectra(args.test, args.labels, args.task)
    # keep only spectra that survive preprocessing so every method sees the same indices
    processed, kept = preprocess_all(raw_train, cfg.preprocess)
    train = TaskData(processed, train_labels[kept])
    raw_train = [raw_train[i] for i in kept]
    processed, kept = preprocess_all(raw_valid, cfg.preprocess)
    valid = TaskData(processed, valid_labels[kept])
    raw_valid = [raw_valid[i] for i in kept]
    processed, kept = preprocess_all(raw_test, cfg.preprocess)
    test = TaskData(processed, test_labels[kept])
    raw_test = [raw_test[i] for i in kept]

    methods: Dict[str, Method] = {}
    if "frozen" in methods_requested:
        encoder = restore_encoder(Path(args.checkpoint).read_bytes())
        train_emb = embed_spectra(encoder, raw_train, cfg.preprocess).data
        valid_emb = embed_spectra(encoder, raw_valid, cfg.preprocess).data
        test_emb = embed_spectra(encoder, raw_test, cfg.preprocess).data

        def frozen(indices: np.ndarray) -> np.ndarray:
            result = train_head(train_emb[indices], train.labels[indices], valid_emb, valid.labels, cfg.head)
            return predict_head(result.head, test_emb)

        methods["frozen"] = frozen
    if "scratch" in methods_requested:

        def scratch(indices: np.ndarray) -> np.ndarray:
            result = train_end_to_end(train.subset(indices), valid, cfg.encoder, cfg.e2e)
            return predict_spectra(result.encoder, result.head, test.spectra, cfg.e2e.batch_size)

        methods["scratch"] = scratch
    if "binned" in methods_requested:
        train_bins = bin_spectra(raw_train, cfg.preprocess)
        valid_bins = bin_spectra(raw_valid, cfg.preprocess)
        test_bins = bin_spectra(raw_test, cfg.preprocess)

        def binned(indices: np.ndarray) -> np.ndarray:
            model = gbdt_fit(train_bins[indices], train.labels[indices], valid_bins, valid.labels, cfg.gbdt)
            return gbdt_predict(model, test_bins)

        methods["binned"] = binned

    rows = learning_curve(
        train.labels, methods, lambda scores: auroc(scores, test.labels), args.subsets, cfg.head.seed
    )
    write_text(args.out, write_learning_curve(rows))
    inputs = [*args.train, *args.valid, *args.test, args.labels] + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(args.out, "learning-curve", cfg, cfg.head.seed, inputs)
