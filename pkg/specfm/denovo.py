"""Autoregressive peptide decoder providing the de novo sequencing loss"""

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .chem import PHOSPHO_DELTA, PHOSPHO_SITES, RESIDUE_MASSES, Peptide
from .config import DecoderConfig, EncoderConfig
from .encoder import PeakBatch, SpectrumEncoder, encode_mz, load_checkpoint, load_state, save_checkpoint
from .errors import ConfigError, FormatError, VocabError

logger = logging.getLogger(__name__)

EOS = "$"
_DELTA_TOLERANCE = 1e-3


@dataclass(frozen=True)
class Vocabulary:
    """Predictable tokens (residues, modified residues, EOS); padding id sits past the end

    Token ids are dense from 0 in the order given; `pad_id == size`.
    """

    residues: Tuple[Tuple[str, float], ...]

    def __post_init__(self):
        seen = set()
        for aa, delta in self.residues:
            if aa not in RESIDUE_MASSES:
                raise VocabError(f"Token residue {aa!r} has no mass")
            key = (aa, round(delta, 5))
            if key in seen:
                raise VocabError(f"Duplicate vocabulary token {aa}{delta:+.5f}")
            seen.add(key)

    @classmethod
    def default(cls, phospho: bool = True) -> "Vocabulary":
        """Canonical residues plus phospho S/T/Y"""
        residues = [(aa, 0.0) for aa in RESIDUE_MASSES]
        if phospho:
            residues += [(aa, PHOSPHO_DELTA) for aa in sorted(PHOSPHO_SITES)]
        return cls(tuple(residues))

    @classmethod
    def from_tsv(cls, path: Union[str, Path]) -> "Vocabulary":
        """Canonical residues followed by the `token\\tmass_delta` variants in file order"""
        residues = [(aa, 0.0) for aa in RESIDUE_MASSES]
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f, delimiter="\t")
            header = next(reader, None)
            if header != ["token", "mass_delta"]:
                raise ConfigError(f"{path}: expected header 'token\\tmass_delta', got {header}")
            for row in reader:
                if not row:
                    continue
                try:
                    residues.append((row[0], float(row[1])))
                except (IndexError, ValueError):
                    raise ConfigError(f"{path}: bad vocabulary row {row}")
        return cls(tuple(residues))

    @property
    def tokens(self) -> List[str]:
        return [aa if delta == 0 else f"{aa}[{delta:+.5f}]" for aa, delta in self.residues] + [EOS]

    @property
    def size(self) -> int:
        return len(self.residues) + 1

    @property
    def eos_id(self) -> int:
        return len(self.residues)

    @property
    def pad_id(self) -> int:
        return self.size

    def tokenize(self, peptide: Peptide) -> List[int]:
        """Residue token ids (no EOS)"""
        ids = []
        for aa, delta in zip(peptide.sequence, peptide.residue_deltas()):
            for token_id, (t_aa, t_delta) in enumerate(self.residues):
                if t_aa == aa and abs(t_delta - delta) <= _DELTA_TOLERANCE:
                    ids.append(token_id)
                    break
            else:
                raise VocabError(f"Residue {aa}{delta:+.5f} is not in the vocabulary")
        return ids

    def detokenize(self, ids: Sequence[int]) -> Peptide:
        """Token ids to a Peptide, stopping at the first EOS"""
        sequence, mods = [], []
        for token_id in ids:
            token_id = int(token_id)
            if token_id == self.eos_id:
                break
            if not 0 <= token_id < len(self.residues):
                raise VocabError(f"Token id {token_id} is not a residue")
            aa, delta = self.residues[token_id]
            if delta:
                mods.append((len(sequence), delta))
            sequence.append(aa)
        return Peptide(tuple(sequence), tuple(mods))

    def to_config(self) -> List[List[Union[str, float]]]:
        return [[aa, delta] for aa, delta in self.residues]

    @classmethod
    def from_config(cls, residues) -> "Vocabulary":
        return cls(tuple((str(aa), float(delta)) for aa, delta in residues))


class PeptideDecoder(nn.Module):
    """Causal transformer decoder with cross-attention over encoder peak memory

    Position 0 carries the precursor: its m/z encoding plus a learned per-charge vector.
    """

    def __init__(self, d_model: int, vocab: Vocabulary, cfg: Optional[DecoderConfig] = None, encoder_cfg: Optional[EncoderConfig] = None):
        super().__init__()
        self.config = cfg or DecoderConfig()
        self.vocab = vocab
        self.d_model = d_model
        encoder_cfg = encoder_cfg or EncoderConfig(d_model=d_model, n_heads=1)
        self.lambda_min = encoder_cfg.lambda_min
        self.lambda_max = encoder_cfg.lambda_max
        self.aa_embedding = nn.Embedding(vocab.size + 1, d_model, padding_idx=vocab.pad_id)
        self.charge_embedding = nn.Embedding(self.config.max_charge + 1, d_model)
        layer = nn.TransformerDecoderLayer(
            d_model=d_model,
            nhead=self.config.n_heads,
            dim_feedforward=self.config.ff_dim or 4 * d_model,
            dropout=0.0,
            activation="relu",
            batch_first=True,
            norm_first=False,
        )
        self.transformer = nn.TransformerDecoder(layer, num_layers=self.config.n_layers)
        self.final = nn.Linear(d_model, vocab.size)

    def _dtype(self) -> torch.dtype:
        return self.final.weight.dtype

    def precursor_embedding(self, precursor_mz: torch.Tensor, charge: torch.Tensor) -> torch.Tensor:
        charge = charge.clamp(1, self.config.max_charge)
        mass = encode_mz(precursor_mz.to(torch.float64), self.d_model, self.lambda_min, self.lambda_max)
        return mass.to(self._dtype()) + self.charge_embedding(charge)

    def forward(
        self,
        tokens: torch.Tensor,
        precursor_mz: torch.Tensor,
        precursor_charge: torch.Tensor,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
    ) -> torch.Tensor:
        """Logits of shape (batch, tokens + 1, vocab.size); position i predicts token i"""
        batch, length = tokens.shape
        steps = torch.arange(length + 1, device=tokens.device, dtype=torch.float64)
        positions = encode_mz(steps, self.d_model, 1.0, 10000.0).to(self._dtype())
        inputs = torch.cat(
            [self.precursor_embedding(precursor_mz, precursor_charge).unsqueeze(1), self.aa_embedding(tokens)], dim=1
        )
        inputs = inputs + positions.unsqueeze(0)
        causal = nn.Transformer.generate_square_subsequent_mask(length + 1, device=tokens.device, dtype=self._dtype())
        padding = torch.cat(
            [torch.zeros(batch, 1, dtype=torch.bool, device=tokens.device), tokens == self.vocab.pad_id], dim=1
        )
        hidden = self.transformer(
            inputs,
            memory.to(self._dtype()),
            tgt_mask=causal,
            tgt_key_padding_mask=padding.to(self._dtype()).masked_fill(padding, float("-inf")),
            memory_key_padding_mask=(~memory_mask).to(self._dtype()).masked_fill(~memory_mask, float("-inf")),
        )
        return self.final(hidden)


def pad_targets(peptides: Sequence[Peptide], vocab: Vocabulary, max_len: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forcing inputs (residue ids, padded) and targets (residue ids + EOS, padded)"""
    encoded = []
    for p in peptides:
        ids = vocab.tokenize(p)
        if max_len is not None and len(ids) > max_len:
            raise VocabError(f"Peptide {p} longer than max_len {max_len}")
        encoded.append(ids)
    width = max((len(ids) for ids in encoded), default=0)
    inputs = torch.full((len(encoded), width), vocab.pad_id, dtype=torch.long)
    targets = torch.full((len(encoded), width + 1), vocab.pad_id, dtype=torch.long)
    for row, ids in enumerate(encoded):
        inputs[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        targets[row, : len(ids) + 1] = torch.tensor(ids + [vocab.eos_id], dtype=torch.long)
    return inputs, targets


def token_losses(logits: torch.Tensor, targets: torch.Tensor, pad_id: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-position cross-entropy and the validity mask"""
    valid = targets != pad_id
    log_probs = F.log_softmax(logits, dim=-1)
    picked = log_probs.gather(-1, targets.clamp(max=logits.shape[-1] - 1).unsqueeze(-1)).squeeze(-1)
    return -picked * valid.to(logits.dtype), valid


def sequencing_loss(
    peak_memory: torch.Tensor,
    mask: torch.Tensor,
    precursor_mz: torch.Tensor,
    precursor_charge: torch.Tensor,
    targets: Sequence[Peptide],
    decoder: PeptideDecoder,
) -> torch.Tensor:
    """Mean token-level cross-entropy over target residues plus EOS (teacher forced)"""
    inputs, target_ids = pad_targets(targets, decoder.vocab, decoder.config.max_len)
    logits = decoder(inputs, precursor_mz, precursor_charge, peak_memory, mask)
    losses, valid = token_losses(logits, target_ids, decoder.vocab.pad_id)
    return losses.sum() / valid.sum()


@torch.no_grad()
def greedy_decode(
    peak_memory: torch.Tensor,
    mask: torch.Tensor,
    precursor_mz: torch.Tensor,
    precursor_charge: torch.Tensor,
    decoder: PeptideDecoder,
    max_len: Optional[int] = None,
) -> List[Peptide]:
    """Argmax token per step until EOS or max_len"""
    max_len = decoder.config.max_len if max_len is None else max_len
    vocab = decoder.vocab
    batch = peak_memory.shape[0]
    tokens = torch.zeros((batch, 0), dtype=torch.long)
    finished = torch.zeros(batch, dtype=torch.bool)
    for _ in range(max_len):
        logits = decoder(tokens, precursor_mz, precursor_charge, peak_memory, mask)
        next_ids = logits[:, -1, :].argmax(dim=-1)
        next_ids = torch.where(finished, torch.full_like(next_ids, vocab.pad_id), next_ids)
        finished |= next_ids == vocab.eos_id
        tokens = torch.cat([tokens, next_ids.unsqueeze(1)], dim=1)
        if bool(finished.all()):
            break
    return [vocab.detokenize([t for t in row.tolist() if t != vocab.pad_id]) for row in tokens]


def aa_accuracy(predicted: Peptide, truth: Peptide) -> float:
    """Positional residue matches over the longer length"""
    longest = max(len(predicted), len(truth))
    if longest == 0:
        return 1.0
    pred = list(zip(predicted.sequence, (round(d, 3) for d in predicted.residue_deltas())))
    true = list(zip(truth.sequence, (round(d, 3) for d in truth.residue_deltas())))
    return sum(a == b for a, b in zip(pred, true)) / longest


class DenovoModel(nn.Module):
    """Spectrum encoder plus peptide decoder: the pre-training model"""

    def __init__(
        self,
        encoder_cfg: Optional[EncoderConfig] = None,
        decoder_cfg: Optional[DecoderConfig] = None,
        vocab: Optional[Vocabulary] = None,
        encoder: Optional[SpectrumEncoder] = None,
    ):
        super().__init__()
        self.encoder = encoder or SpectrumEncoder(encoder_cfg)
        self.vocab = vocab or Vocabulary.default()
        self.decoder = PeptideDecoder(self.encoder.d_model, self.vocab, decoder_cfg, self.encoder.config)

    def loss(self, batch: PeakBatch, peptides: Sequence[Peptide]) -> torch.Tensor:
        memory, _ = self.encoder(batch)
        return sequencing_loss(memory, batch.mask, batch.precursor_mz, batch.precursor_charge, peptides, self.decoder)

    def decode(self, batch: PeakBatch, max_len: Optional[int] = None) -> List[Peptide]:
        with torch.no_grad():
            memory, _ = self.encoder(batch)
        return greedy_decode(memory, batch.mask, batch.precursor_mz, batch.precursor_charge, self.decoder, max_len)

    def checkpoint_config(self) -> dict:
        return {
            "encoder": self.encoder.config.model_dump(),
            "decoder": self.decoder.config.model_dump(),
            "vocabulary": self.vocab.to_config(),
        }


def denovo_checkpoint(model: DenovoModel, extra_state=None, extra_config=None) -> bytes:
    """Checkpoint bytes for the encoder-decoder, optionally with more named tensors"""
    state = OrderedDict(model.state_dict())
    state.update(extra_state or {})
    config = model.checkpoint_config()
    config.update(extra_config or {})
    return save_checkpoint(state, config)


def restore_denovo(data: bytes) -> DenovoModel:
    """Rebuild a DenovoModel from a de novo or multi-task checkpoint"""
    config, state = load_checkpoint(data)
    missing = [key for key in ("encoder", "decoder", "vocabulary") if key not in config]
    if missing:
        raise FormatError(f"Checkpoint lacks {', '.join(missing)} configuration")
    try:
        model = DenovoModel(
            EncoderConfig(**config["encoder"]),
            DecoderConfig(**config["decoder"]),
            Vocabulary.from_config(config["vocabulary"]),
        )
    except (ValueError, TypeError) as e:
        raise FormatError(f"Invalid model configuration in checkpoint: {e}")
    load_state(model, state, foreign=("heads.",))
    return model
