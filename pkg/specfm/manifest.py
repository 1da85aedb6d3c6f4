"""Run manifests recording how an output file was produced"""

import hashlib
import logging
from pathlib import Path
from typing import Iterable, Optional, Union

from .config import RunConfig, dump_run_config

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def file_digest(path: PathLike) -> str:
    """SHA-256 hex digest of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def render_manifest(command: str, cfg: RunConfig, seed: Optional[int], inputs: Iterable[PathLike]) -> str:
    lines = [f"command = {command}", f"seed = {'' if seed is None else seed}"]
    for i, path in enumerate(inputs):
        lines.append(f"input.{i} = {file_digest(path)}  {path}")
    return "\n".join(lines) + "\n" + dump_run_config(cfg)


def write_manifest(
    output: PathLike, command: str, cfg: RunConfig, seed: Optional[int] = None, inputs: Iterable[PathLike] = ()
) -> Path:
    """Write `<output>.manifest` next to the primary output"""
    path = Path(f"{output}.manifest")
    inputs = list(inputs)
    path.write_text(render_manifest(command, cfg, seed, inputs), encoding="utf-8")
    logger.info(f"Run: {command} -> {output} ({len(inputs)} inputs)")
    return path
