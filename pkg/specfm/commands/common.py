"""Helpers shared by the subcommand handlers"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import RunConfig, load_run_config, settings
from ..errors import ConfigError
from ..ms_io import EmbeddingMatrix, Spectrum, join_labels, read_labels, read_spectra, read_text
from ..schemas import LabelRecord, Task

logger = logging.getLogger(__name__)

SEEDED_SECTIONS = ("synth", "head", "e2e", "pretrain", "multitask")


def resolve_config(args, flag_values: Optional[Dict[str, object]] = None) -> RunConfig:
    """defaults < --config file < --set overrides < command flags < --seed"""
    overrides = list(args.overrides)
    for key, value in (flag_values or {}).items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        overrides.append(f"{key}={value}")
    if args.seed is not None:
        overrides.extend(f"{section}.seed={args.seed}" for section in SEEDED_SECTIONS)
    return load_run_config(Path(args.config) if args.config else None, overrides)


def read_many(paths: Sequence[str]) -> List[Spectrum]:
    """Parse spectrum files in parallel, concatenated in argument order"""
    workers = max(1, min(settings.num_workers, len(paths)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parsed = list(pool.map(read_spectra, paths))
    spectra = [s for chunk in parsed for s in chunk]
    logger.info(f"Read {len(spectra)} spectra from {len(paths)} file(s)")
    return spectra


def load_label_file(path: str) -> List[LabelRecord]:
    return read_labels(read_text(path))


def infer_task(records: Sequence[LabelRecord], task: Optional[str]) -> Task:
    if task:
        return Task(task)
    tasks = sorted({r.task.value for r in records})
    if len(tasks) != 1:
        raise ConfigError(f"Label file holds tasks {tasks}; pass --task")
    return Task(tasks[0])


def labeled_spectra(paths: Sequence[str], labels_path: str, task: str) -> Tuple[List[Spectrum], np.ndarray]:
    joined = join_labels(read_many(paths), load_label_file(labels_path), task)
    return [s for s, _ in joined], np.asarray([label for _, label in joined], dtype=np.int64)


def labeled_embeddings(
    matrix: EmbeddingMatrix, records: Sequence[LabelRecord], task: str
) -> Tuple[np.ndarray, np.ndarray, List[Tuple[str, str]]]:
    """Embedding rows that carry a label for the task, with the labels and row ids"""
    lookup = {(r.run_id, r.scan_id): r.label for r in records if r.task == Task(task)}
    keep = [i for i, row in enumerate(matrix.rows) if row in lookup]
    if len(keep) < matrix.n_rows:
        logger.warning(f"Dropped {matrix.n_rows - len(keep)} embedding rows without a {task} label")
    rows = [matrix.rows[i] for i in keep]
    labels = np.asarray([lookup[row] for row in rows], dtype=np.int64)
    return matrix.data[keep], labels, rows


def write_text(path: str, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
    logger.info(f"Wrote {path}")


def write_bytes(path: str, data: bytes) -> None:
    Path(path).write_bytes(data)
    logger.info(f"Wrote {path} ({len(data)} bytes)")


def split_list(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"Expected a comma-separated list of integers, got {text!r}")
