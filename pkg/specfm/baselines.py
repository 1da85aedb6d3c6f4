"""Non-transformer baselines: gradient boosted trees over binned or oxonium features, and the oxonium ratio"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .config import GbdtConfig, PreprocessConfig
from .errors import DegenerateInput, DegenerateLabels, DegenerateValidation, FormatError
from .metrics import auroc
from .ms_io import Spectrum
from .preprocess import OxoniumTable, bin_spectra, extract_oxonium, load_oxonium_table

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SGBT"
MODEL_VERSION = 1

OxoniumMode = Literal["ratio", "gbdt54"]


@dataclass
class Tree:
    """Flattened regression tree; feature -1 marks a leaf, rows go left when x < threshold"""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            rows = np.nonzero(active)[0]
            current = node[rows]
            go_left = x[rows, self.feature[current]] < self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass
class GbdtModel:
    base_score: float
    trees: List[Tree]
    n_features: int
    config: GbdtConfig = field(default_factory=GbdtConfig)
    best_round: int = 0
    n_rounds_fit: int = 0
    best_auroc: Optional[float] = None

    def margin(self, x: np.ndarray) -> np.ndarray:
        total = np.full(x.shape[0], self.base_score, dtype=np.float64)
        for tree in self.trees:
            total += tree.predict(x)
        return total


class _TreeBuilder:
    """Exact greedy split search on second-order gradient statistics"""

    def __init__(self, x: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: GbdtConfig):
        self.x, self.g, self.h, self.cfg = x, g, h, cfg
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _new_node(self) -> int:
        for column in (self.feature, self.left, self.right):
            column.append(-1)
        self.threshold.append(0.0)
        self.value.append(0.0)
        return len(self.feature) - 1

    def _best_split(self, rows: np.ndarray) -> Optional[Tuple[int, float, float]]:
        lam, min_child = self.cfg.lambda_l2, self.cfg.min_child_weight
        g, h = self.g[rows], self.h[rows]
        g_total, h_total = g.sum(), h.sum()
        parent = g_total**2 / (h_total + lam)
        best: Optional[Tuple[int, float, float]] = None
        for j in range(self.x.shape[1]):
            values = self.x[rows, j]
            order = np.argsort(values, kind="stable")
            sorted_values = values[order]
            g_left = np.cumsum(g[order])[:-1]
            h_left = np.cumsum(h[order])[:-1]
            # candidate cut after position i only between distinct values
            distinct = sorted_values[1:] > sorted_values[:-1]
            g_right, h_right = g_total - g_left, h_total - h_left
            valid = distinct & (h_left >= min_child) & (h_right >= min_child)
            if not np.any(valid):
                continue
            gain = g_left**2 / (h_left + lam) + g_right**2 / (h_right + lam) - parent
            gain = np.where(valid, gain, -np.inf)
            i = int(np.argmax(gain))
            if best is None or gain[i] > best[2]:
                threshold = (sorted_values[i] + sorted_values[i + 1]) / 2.0
                best = (j, float(threshold), float(gain[i]))
        if best is None or best[2] < 0:
            return None
        return best

    def build(self, rows: np.ndarray, depth: int) -> int:
        node = self._new_node()
        split = self._best_split(rows) if depth < self.cfg.max_depth else None
        if split is None:
            leaf = -self.g[rows].sum() / (self.h[rows].sum() + self.cfg.lambda_l2)
            self.value[node] = float(leaf * self.cfg.eta)
            return node
        j, threshold, _ = split
        goes_left = self.x[rows, j] < threshold
        self.feature[node] = j
        self.threshold[node] = threshold
        self.left[node] = self.build(rows[goes_left], depth + 1)
        self.right[node] = self.build(rows[~goes_left], depth + 1)
        return node

    def tree(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
        )


def _check_features(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DegenerateInput(f"{name} must be a 2-D feature matrix, got shape {x.shape}")
    if np.isnan(x).any():
        raise DegenerateInput(f"{name} contains NaN")
    return x


def gbdt_fit(
    x: np.ndarray,
    y: Sequence[int],
    x_valid: Optional[np.ndarray] = None,
    y_valid: Optional[Sequence[int]] = None,
    cfg: Optional[GbdtConfig] = None,
) -> GbdtModel:
    """Logistic-loss gradient boosting with validation-AUROC early stopping

    Args:
        x: (n, f) training features
        y: 0/1 training labels, both classes present
        x_valid: optional validation features; without them all max_rounds are fit
        y_valid: validation labels
        cfg: tree and boosting parameters

    Returns:
        GbdtModel truncated at the best validation round
    """
    cfg = cfg or GbdtConfig()
    x = _check_features(x, "training features")
    y = np.asarray(y, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise DegenerateLabels(f"{n_pos} positives among {y.size} training labels")
    validate = x_valid is not None and y_valid is not None
    if validate:
        x_valid = _check_features(x_valid, "validation features")
        y_valid = np.asarray(y_valid, dtype=np.int64)
        n_valid_pos = int(y_valid.sum())
        if n_valid_pos == 0 or n_valid_pos == y_valid.size:
            raise DegenerateValidation(f"{n_valid_pos} positives among {y_valid.size} validation labels")

    prior = n_pos / y.size
    model = GbdtModel(base_score=float(np.log(prior / (1 - prior))), trees=[], n_features=x.shape[1], config=cfg)
    margin = np.full(y.size, model.base_score)
    valid_margin = np.full(y_valid.size, model.base_score) if validate else None
    rows = np.arange(y.size)
    best_score, best_round = -np.inf, 0

    for round_ in range(1, cfg.max_rounds + 1):
        p = expit(margin)
        builder = _TreeBuilder(x, p - y, p * (1 - p), cfg)
        builder.build(rows, 0)
        tree = builder.tree()
        model.trees.append(tree)
        margin += tree.predict(x)
        model.n_rounds_fit = round_
        if not validate:
            best_round = round_
            continue
        valid_margin += tree.predict(x_valid)
        score = auroc(valid_margin, y_valid)
        if score > best_score:
            best_score, best_round = score, round_
        elif round_ - best_round >= cfg.early_stopping_rounds:
            logger.info(f"GBDT early stop at round {round_}; best round {best_round} (auroc {best_score:.4f})")
            break

    model.trees = model.trees[:best_round]
    model.best_round = best_round
    model.best_auroc = float(best_score) if validate else None
    logger.info(f"GBDT fit {model.n_rounds_fit} rounds, kept {best_round} trees")
    return model


def gbdt_predict(model: GbdtModel, x: np.ndarray) -> np.ndarray:
    """Positive-class probabilities sigmoid(base + sum of tree outputs)"""
    x = _check_features(x, "features")
    if x.shape[1] != model.n_features:
        raise DegenerateInput(f"Model expects {model.n_features} features, got {x.shape[1]}")
    return expit(model.margin(x))


def save_gbdt(model: GbdtModel) -> bytes:
    """SGBT binary: header, JSON metadata block, then per-tree node arrays"""
    meta = {
        "base_score": model.base_score,
        "n_features": model.n_features,
        "best_round": model.best_round,
        "n_rounds_fit": model.n_rounds_fit,
        "best_auroc": model.best_auroc,
        "config": model.config.model_dump(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(model.trees)))
    for tree in model.trees:
        parts.append(struct.pack("<I", tree.n_nodes))
        parts.append(tree.feature.astype("<i4").tobytes())
        parts.append(tree.threshold.astype("<f8").tobytes())
        parts.append(tree.left.astype("<i4").tobytes())
        parts.append(tree.right.astype("<i4").tobytes())
        parts.append(tree.value.astype("<f8").tobytes())
    return b"".join(parts)


def load_gbdt(data: bytes) -> GbdtModel:
    view = memoryview(data)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise FormatError(f"GBDT model truncated at byte {offset}")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MODEL_MAGIC:
        raise FormatError("Not a GBDT model file (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != MODEL_VERSION:
        raise FormatError(f"Unsupported GBDT model version {version}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
        cfg = GbdtConfig(**meta["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise FormatError(f"Corrupt GBDT metadata: {e}")
    (n_trees,) = struct.unpack("<I", take(4))
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = struct.unpack("<I", take(4))
        feature = np.frombuffer(take(4 * n_nodes), dtype="<i4").astype(np.int32)
        threshold = np.frombuffer(take(8 * n_nodes), dtype="<f8").astype(np.float64)
        left = np.frombuffer(take(4 * n_nodes), dtype="<i4").astype(np.int32)
        right = np.frombuffer(take(4 * n_nodes), dtype="<i4").astype(np.int32)
        value = np.frombuffer(take(8 * n_nodes), dtype="<f8").astype(np.float64)
        internal = feature >= 0
        if np.any(internal & ((left < 0) | (right < 0) | (left >= n_nodes) | (right >= n_nodes))):
            raise FormatError("GBDT tree has an internal node without two children")
        if not np.all(np.isfinite(value)):
            raise FormatError("GBDT tree has a non-finite leaf value")
        trees.append(Tree(feature, threshold, left, right, value))
    if offset != len(view):
        raise FormatError(f"{len(view) - offset} trailing bytes after GBDT trees")
    return GbdtModel(
        base_score=float(meta["base_score"]),
        trees=trees,
        n_features=int(meta["n_features"]),
        config=cfg,
        best_round=int(meta["best_round"]),
        n_rounds_fit=int(meta["n_rounds_fit"]),
        best_auroc=meta["best_auroc"],
    )


# Spectrum-level baselines

LabeledSpectra = Tuple[Sequence[Spectrum], Sequence[int]]


@dataclass
class BaselineResult:
    scores: np.ndarray
    model: Optional[GbdtModel] = None


def binned_baseline(
    train: LabeledSpectra,
    valid: LabeledSpectra,
    test: Sequence[Spectrum],
    preprocess_cfg: Optional[PreprocessConfig] = None,
    cfg: Optional[GbdtConfig] = None,
) -> BaselineResult:
    """Bin raw peaks, fit boosted trees, score the test spectra"""
    preprocess_cfg = preprocess_cfg or PreprocessConfig()
    model = gbdt_fit(
        bin_spectra(list(train[0]), preprocess_cfg),
        train[1],
        bin_spectra(list(valid[0]), preprocess_cfg),
        valid[1],
        cfg,
    )
    test_x = bin_spectra(list(test), preprocess_cfg)
    if test_x.shape[0] == 0:
        return BaselineResult(np.zeros(0), model)
    return BaselineResult(gbdt_predict(model, test_x), model)


def bin_resolution_sweep(
    train: LabeledSpectra,
    valid: LabeledSpectra,
    test: LabeledSpectra,
    n_bins: Sequence[int],
    preprocess_cfg: Optional[PreprocessConfig] = None,
    cfg: Optional[GbdtConfig] = None,
) -> Dict[int, float]:
    """Test AUROC of the binned baseline at each bin count"""
    preprocess_cfg = preprocess_cfg or PreprocessConfig()
    results: Dict[int, float] = {}
    for bins in n_bins:
        swept = preprocess_cfg.model_copy(update={"n_bins": bins})
        result = binned_baseline(train, valid, test[0], swept, cfg)
        results[bins] = auroc(result.scores, test[1])
        logger.info(f"bin sweep: {bins} bins ({swept.bin_width:.3f} m/z) -> test auroc {results[bins]:.4f}")
    return results


def write_bin_sweep(results: Dict[int, float], preprocess_cfg: Optional[PreprocessConfig] = None) -> str:
    preprocess_cfg = preprocess_cfg or PreprocessConfig()
    span = preprocess_cfg.bin_hi - preprocess_cfg.bin_lo
    lines = ["n_bins\tbin_width\tauroc"]
    for bins, score in results.items():
        lines.append(f"{bins}\t{span / bins:.4f}\t{score:.6f}")
    return "\n".join(lines) + "\n"


def oxonium_features(
    spectra: Sequence[Spectrum], table: OxoniumTable, preprocess_cfg: Optional[PreprocessConfig] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """(n, 54) oxonium intensity matrix and the n ratio scores"""
    vectors, scores = [], []
    for s in spectra:
        vector, score = extract_oxonium(s, table, preprocess_cfg)
        vectors.append(vector)
        scores.append(score)
    if not vectors:
        return np.zeros((0, len(table))), np.zeros(0)
    return np.stack(vectors), np.asarray(scores)


def oxonium_baselines(
    mode: OxoniumMode,
    test: Sequence[Spectrum],
    train: Optional[LabeledSpectra] = None,
    valid: Optional[LabeledSpectra] = None,
    table: Optional[OxoniumTable] = None,
    preprocess_cfg: Optional[PreprocessConfig] = None,
    cfg: Optional[GbdtConfig] = None,
) -> BaselineResult:
    """Score glycopeptide spectra as O-linked from oxonium ions

    Mode "ratio" returns the 144 / (138 + 144) intensity ratio without fitting;
    mode "gbdt54" fits boosted trees on all 54 oxonium intensities.
    """
    table = table or load_oxonium_table(preprocess_cfg.oxonium_table if preprocess_cfg else None)
    test_x, test_ratio = oxonium_features(test, table, preprocess_cfg)
    if mode == "ratio":
        return BaselineResult(test_ratio)
    if mode != "gbdt54":
        raise DegenerateInput(f"Unknown oxonium baseline mode {mode!r}")
    if train is None or valid is None:
        raise DegenerateInput("gbdt54 mode needs training and validation spectra")
    train_x, _ = oxonium_features(train[0], table, preprocess_cfg)
    valid_x, _ = oxonium_features(valid[0], table, preprocess_cfg)
    model = gbdt_fit(train_x, train[1], valid_x, valid[1], cfg)
    return BaselineResult(gbdt_predict(model, test_x) if test_x.shape[0] else np.zeros(0), model)


def save_model_file(model: GbdtModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(save_gbdt(model))


def load_model_file(path: Union[str, Path]) -> GbdtModel:
    return load_gbdt(Path(path).read_bytes())
