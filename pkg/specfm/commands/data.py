"""Data commands: synthesize labeled spectra and embed spectrum files"""

import logging
from pathlib import Path

from ..encoder import embed_spectra, restore_encoder
from ..manifest import write_manifest
from ..ms_io import save_embeddings
from ..synthgen import gen_dataset, save_dataset
from .common import read_many, resolve_config

logger = logging.getLogger(__name__)

SYNTH_TASKS = ["quality", "chimera", "phospho", "glyco", "denovo"]


def register(subparsers, parent) -> None:
    synth = subparsers.add_parser("synth", parents=[parent], help="generate a synthetic labeled dataset")
    synth.add_argument("--task", choices=SYNTH_TASKS, help="synthetic task (default synth.task)")
    synth.add_argument("--n", type=int, help="number of spectra (default synth.n)")
    synth.add_argument("--out", required=True, help="output MGF path")
    synth.add_argument("--labels", help="output label TSV path")
    synth.add_argument("--provenance", help="output provenance JSON-lines path")
    synth.set_defaults(handler=run_synth)

    embed = subparsers.add_parser("embed", parents=[parent], help="embed spectra with a pre-trained encoder")
    embed.add_argument("--checkpoint", required=True, help="checkpoint holding an encoder")
    embed.add_argument("--in", dest="inputs", nargs="+", required=True, help="MGF or mzML files")
    embed.add_argument("--out", required=True, help="output SEMB path (row ids go to <out>.tsv)")
    embed.add_argument("--batch-size", type=int, default=64, help="spectra per encoder batch")
    embed.set_defaults(handler=run_embed)


def run_synth(args) -> None:
    """Generate synthetic spectra with labels and provenance"""
    cfg = resolve_config(args, {"synth.task": args.task, "synth.n": args.n})
    records = gen_dataset(cfg.synth)
    save_dataset(records, args.out, args.labels, args.provenance)
    write_manifest(args.out, "synth", cfg, cfg.synth.seed)


def run_embed(args) -> None:
    """Pooled embeddings for every spectrum in the input files"""
    cfg = resolve_config(args)
    encoder = restore_encoder(Path(args.checkpoint).read_bytes())
    spectra = read_many(args.inputs)
    matrix = embed_spectra(encoder, spectra, cfg.preprocess, args.batch_size)
    save_embeddings(matrix, args.out)
    logger.info(f"Embedded {matrix.n_rows} spectra into {matrix.dim} dimensions")
    write_manifest(args.out, "embed", cfg, None, [args.checkpoint, *args.inputs])
