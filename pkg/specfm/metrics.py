"""ROC/AUROC, PR/AUPR, F1, PCA and the nested-subset learning curve"""

import io
import json
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInput, DegenerateLabels
from .schemas import MetricsReport

logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[float], np.ndarray]


def _scored(scores: ArrayLike, labels: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DegenerateInput(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.all(np.isfinite(scores)):
        raise DegenerateInput("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise DegenerateInput("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def _require_both(labels: np.ndarray) -> Tuple[int, int]:
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"{n_pos} positives and {n_neg} negatives")
    return n_pos, n_neg


def auroc(scores: ArrayLike, labels: ArrayLike) -> float:
    """Mann-Whitney AUROC: P(pos > neg) + 0.5 P(tie), via midranks"""
    scores, labels = _scored(scores, labels)
    n_pos, n_neg = _require_both(labels)
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class Curve:
    """Threshold sweep; for ROC x=fpr, y=tpr, for PR x=recall, y=precision"""

    threshold: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def points(self) -> List[Tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.x, self.y)]


def _cumulative_counts(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # last index of each group of equal scores
    last = np.r_[np.nonzero(np.diff(sorted_scores))[0], sorted_scores.size - 1]
    tp = np.cumsum(sorted_labels)[last]
    fp = (last + 1) - tp
    return sorted_scores[last], tp.astype(np.float64), fp.astype(np.float64)


def roc_points(scores: ArrayLike, labels: ArrayLike) -> Curve:
    """ROC from (0, 0) to (1, 1) over distinct scores, descending"""
    scores, labels = _scored(scores, labels)
    n_pos, n_neg = _require_both(labels)
    thresholds, tp, fp = _cumulative_counts(scores, labels)
    return Curve(
        threshold=np.r_[np.inf, thresholds],
        x=np.r_[0.0, fp / n_neg],
        y=np.r_[0.0, tp / n_pos],
    )


def pr_points(scores: ArrayLike, labels: ArrayLike) -> Curve:
    """Step-wise (recall, precision) at each distinct score threshold, descending"""
    scores, labels = _scored(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DegenerateLabels("no positives")
    thresholds, tp, fp = _cumulative_counts(scores, labels)
    return Curve(threshold=thresholds, x=tp / n_pos, y=tp / (tp + fp))


def aupr(scores: ArrayLike, labels: ArrayLike) -> float:
    """Average precision: sum over thresholds of (R_i - R_{i-1}) * P_i"""
    curve = pr_points(scores, labels)
    recall_steps = np.diff(np.r_[0.0, curve.x])
    return float(np.sum(recall_steps * curve.y))


def f1_at(scores: ArrayLike, labels: ArrayLike, threshold: float = 0.5) -> float:
    """F1 of `score >= threshold`; 0 when nothing is predicted or nothing is positive"""
    scores, labels = _scored(scores, labels)
    predicted = scores >= threshold
    tp = int(np.sum(predicted & (labels == 1)))
    n_predicted = int(predicted.sum())
    n_true = int(labels.sum())
    if n_predicted == 0 or n_true == 0 or tp == 0:
        return 0.0
    precision = tp / n_predicted
    recall = tp / n_true
    return 2 * precision * recall / (precision + recall)


def evaluate_scores(task: str, scores: ArrayLike, labels: ArrayLike, threshold: float = 0.5) -> MetricsReport:
    """AUROC, AUPR and F1 bundled for the metrics JSON"""
    scores, labels = _scored(scores, labels)
    return MetricsReport(
        task=task,
        n=int(labels.size),
        n_pos=int(labels.sum()),
        auroc=auroc(scores, labels),
        aupr=aupr(scores, labels),
        f1=f1_at(scores, labels, threshold),
        threshold=threshold,
    )


def write_metrics_json(report: MetricsReport) -> str:
    return json.dumps(report.model_dump(), indent=2, sort_keys=False) + "\n"


def _format_threshold(value: float) -> str:
    return "inf" if np.isinf(value) else repr(float(value))


def write_roc_csv(curve: Curve) -> str:
    out = io.StringIO()
    out.write("threshold,fpr,tpr\n")
    for t, fpr, tpr in zip(curve.threshold, curve.x, curve.y):
        out.write(f"{_format_threshold(t)},{float(fpr)!r},{float(tpr)!r}\n")
    return out.getvalue()


def write_pr_csv(curve: Curve) -> str:
    out = io.StringIO()
    out.write("threshold,recall,precision\n")
    for t, recall, precision in zip(curve.threshold, curve.x, curve.y):
        out.write(f"{_format_threshold(t)},{float(recall)!r},{float(precision)!r}\n")
    return out.getvalue()


# PCA


@dataclass
class PcaResult:
    components: np.ndarray
    projections: np.ndarray
    variance_explained: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray


def _power_iteration(
    matrix: np.ndarray, previous: List[np.ndarray], rng: np.random.Generator, tol: float, max_iter: int
) -> Tuple[np.ndarray, float]:
    dim = matrix.shape[0]

    def orthogonalize(v: np.ndarray) -> np.ndarray:
        for u in previous:
            v = v - (u @ v) * u
        return v

    v = orthogonalize(rng.standard_normal(dim))
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = orthogonalize(matrix @ v)
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            # null space: any unit vector orthogonal to the found components
            return v, 0.0
        w /= norm
        if w @ v < 0:
            w = -w
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
    return v, float(v @ matrix @ v)


def pca(embeddings: ArrayLike, k: int = 2, tol: float = 1e-12, max_iter: int = 10_000, seed: int = 0) -> PcaResult:
    """Top-k principal components by deflated power iteration on the sample covariance

    Args:
        embeddings: (n, dim) matrix, n >= 2
        k: number of components, k <= dim
        tol: convergence tolerance on successive unit vectors

    Returns:
        PcaResult with orthonormal components (rows), projections and variance fractions
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInput(f"PCA needs at least 2 rows, got shape {x.shape}")
    n, dim = x.shape
    if not 1 <= k <= dim:
        raise DegenerateInput(f"k must be in [1, {dim}], got {k}")
    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / (n - 1)
    total = float(np.trace(covariance))
    rng = np.random.default_rng(seed)
    vectors: List[np.ndarray] = []
    deflated = covariance.copy()
    for _ in range(k):
        v, value = _power_iteration(deflated, vectors, rng, tol, max_iter)
        vectors.append(v)
        deflated = deflated - value * np.outer(v, v)
    basis = np.array(vectors)
    # Rayleigh-Ritz refinement within the converged subspace
    basis, _ = np.linalg.qr(basis.T)
    small = basis.T @ covariance @ basis
    values, rotation = np.linalg.eigh((small + small.T) / 2)
    order = np.argsort(values)[::-1]
    values = np.clip(values[order], 0.0, None)
    components = (basis @ rotation[:, order]).T
    for i, c in enumerate(components):
        pivot = np.argmax(np.abs(c))
        if c[pivot] < 0:
            components[i] = -c
    explained = values / total if total > 0 else np.zeros_like(values)
    return PcaResult(
        components=components,
        projections=centered @ components.T,
        variance_explained=explained,
        eigenvalues=values,
        mean=mean,
    )


def write_pca_csv(
    result: PcaResult, scan_ids: Sequence[str], labels: Optional[Sequence[Optional[int]]] = None
) -> str:
    """`scan_id,pc1,pc2,...,label` with a variance-explained header comment; unknown labels stay blank"""
    k = result.components.shape[0]
    out = io.StringIO()
    explained = ", ".join(f"pc{i + 1}={100 * v:.2f}%" for i, v in enumerate(result.variance_explained))
    out.write(f"# variance explained: {explained}\n")
    out.write(",".join(["scan_id"] + [f"pc{i + 1}" for i in range(k)] + ["label"]) + "\n")
    for row, scan_id in enumerate(scan_ids):
        label = "" if labels is None or labels[row] is None else str(int(labels[row]))
        values = ",".join(f"{float(v)!r}" for v in result.projections[row])
        out.write(f"{scan_id},{values},{label}\n")
    return out.getvalue()


# Learning curve

Method = Callable[[np.ndarray], np.ndarray]


def nested_subsets(n: int, n_subsets: int = 10, seed: int = 0) -> List[np.ndarray]:
    """Seed-shuffled index prefixes halving in size; smallest first, largest is all n"""
    if n_subsets < 1:
        raise DegenerateInput("n_subsets must be >= 1")
    order = np.random.default_rng(seed).permutation(n)
    sizes = [n]
    for _ in range(n_subsets - 1):
        sizes.append(sizes[-1] // 2)
    return [order[:size] for size in reversed(sizes)]


def learning_curve(
    labels: ArrayLike,
    methods: Mapping[str, Method],
    evaluate: Callable[[np.ndarray], float],
    n_subsets: int = 10,
    seed: int = 0,
) -> List[Dict[str, Union[int, str, float]]]:
    """Train every method on each nested subset of the training indices

    Args:
        labels: training labels, used to check each subset has both classes
        methods: name -> callable(train_indices) returning test-set scores
        evaluate: test scores -> AUROC
        n_subsets: number of nested subsets

    Returns:
        Rows of {"train_size", "method", "auroc"}, smallest subset first
    """
    labels = np.asarray(labels)
    subsets = nested_subsets(labels.size, n_subsets, seed)
    smallest = labels[subsets[0]]
    if smallest.size == 0 or smallest.min() == smallest.max():
        raise DegenerateLabels(f"smallest subset of {smallest.size} examples lacks both classes")
    rows = []
    for indices in subsets:
        for name, method in methods.items():
            score = evaluate(method(indices))
            logger.info(f"learning curve: n={indices.size} {name} auroc={score:.4f}")
            rows.append({"train_size": int(indices.size), "method": name, "auroc": float(score)})
    return rows


def write_learning_curve(rows: Sequence[Mapping[str, Union[int, str, float]]]) -> str:
    out = io.StringIO()
    out.write("train_size\tmethod\tauroc\n")
    for row in rows:
        out.write(f"{row['train_size']}\t{row['method']}\t{float(row['auroc']):.6f}\n")
    return out.getvalue()
