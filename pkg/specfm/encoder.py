"""Transformer spectrum encoder: peak embeddings, self-attention stack, mean pooling"""

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .config import EncoderConfig, PreprocessConfig
from .errors import EmptySpectrum, FormatError, NumericError
from .ms_io import EmbeddingMatrix, Spectrum
from .preprocess import ProcessedSpectrum, preprocess_spectrum

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SCPT"
CHECKPOINT_VERSION = 1


def mz_frequencies(d_model: int, lambda_min: float = 0.001, lambda_max: float = 10000.0) -> torch.Tensor:
    """Angular frequencies 2*pi/lambda_k over geometrically spaced wavelengths"""
    half = d_model // 2
    if half == 1:
        wavelengths = torch.tensor([lambda_min], dtype=torch.float64)
    else:
        k = torch.arange(half, dtype=torch.float64)
        wavelengths = lambda_min * (lambda_max / lambda_min) ** (k / (half - 1))
    return 2 * math.pi / wavelengths


def encode_mz(
    mz: torch.Tensor, d_model: int, lambda_min: float = 0.001, lambda_max: float = 10000.0
) -> torch.Tensor:
    """Sinusoidal m/z encoding: sines in the first half, cosines in the second

    Phases are computed in float64; the result keeps the input dtype
    (float64 for non-floating input).
    """
    mz = torch.as_tensor(mz)
    dtype = mz.dtype if mz.is_floating_point() else torch.float64
    omega = mz_frequencies(d_model, lambda_min, lambda_max).to(mz.device)
    phase = mz.to(torch.float64).unsqueeze(-1) * omega
    return torch.cat([torch.sin(phase), torch.cos(phase)], dim=-1).to(dtype)


@dataclass
class PeakBatch:
    """Padded peak tensors; padded slots hold m/z 0 and intensity 0"""

    mz: torch.Tensor
    intensity: torch.Tensor
    mask: torch.Tensor
    precursor_mz: torch.Tensor
    precursor_charge: torch.Tensor

    def __post_init__(self):
        if self.mask.dim() != 2 or bool((self.mask.sum(dim=1) < 1).any()):
            raise EmptySpectrum("Every spectrum in a batch needs at least one valid peak")

    def __len__(self) -> int:
        return int(self.mz.shape[0])

    def to(self, dtype: torch.dtype) -> "PeakBatch":
        return PeakBatch(
            self.mz.to(dtype), self.intensity.to(dtype), self.mask, self.precursor_mz.to(dtype), self.precursor_charge
        )


def collate(spectra: Sequence[ProcessedSpectrum], dtype: torch.dtype = torch.float32) -> PeakBatch:
    """Pad processed spectra into a PeakBatch"""
    if not spectra:
        raise EmptySpectrum("Cannot collate an empty list of spectra")
    max_len = max(s.n_peaks for s in spectra)
    mz = np.zeros((len(spectra), max_len), dtype=np.float64)
    intensity = np.zeros_like(mz)
    mask = np.zeros(mz.shape, dtype=bool)
    for row, s in enumerate(spectra):
        mz[row, : s.n_peaks] = s.mz
        intensity[row, : s.n_peaks] = s.intensity
        mask[row, : s.n_peaks] = True
    return PeakBatch(
        mz=torch.from_numpy(mz).to(dtype),
        intensity=torch.from_numpy(intensity).to(dtype),
        mask=torch.from_numpy(mask),
        precursor_mz=torch.tensor([s.precursor_mz for s in spectra], dtype=dtype),
        precursor_charge=torch.tensor([s.precursor_charge or 2 for s in spectra], dtype=torch.long),
    )


class PeakEncoder(nn.Module):
    """Per-peak embedding: sinusoidal m/z encoding plus a bias-free learned intensity map

    The m/z phases are always computed in float64, whatever dtype the module is cast to.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.d_model = cfg.d_model
        self.lambda_min = cfg.lambda_min
        self.lambda_max = cfg.lambda_max
        self.intensity_embedding = nn.Linear(1, cfg.d_model, bias=False)

    def encode_mz(self, mz: torch.Tensor) -> torch.Tensor:
        encoded = encode_mz(mz.to(torch.float64), self.d_model, self.lambda_min, self.lambda_max)
        return encoded.to(self.intensity_embedding.weight.dtype)

    def forward(self, mz: torch.Tensor, intensity: torch.Tensor) -> torch.Tensor:
        if bool(torch.isnan(mz).any()) or bool(torch.isnan(intensity).any()):
            raise NumericError("NaN in peak m/z or intensity input")
        weight = self.intensity_embedding.weight
        return self.encode_mz(mz) + self.intensity_embedding(intensity.to(weight.dtype).unsqueeze(-1))


class SpectrumEncoder(nn.Module):
    """Post-norm transformer encoder over peaks with masked mean pooling"""

    def __init__(self, cfg: Optional[EncoderConfig] = None):
        super().__init__()
        self.config = cfg or EncoderConfig()
        self.peak_encoder = PeakEncoder(self.config)
        layer = nn.TransformerEncoderLayer(
            d_model=self.config.d_model,
            nhead=self.config.n_heads,
            dim_feedforward=self.config.feedforward_dim,
            dropout=self.config.dropout,
            activation="relu",
            batch_first=True,
            norm_first=False,
        )
        self.transformer = nn.TransformerEncoder(layer, num_layers=self.config.n_layers, enable_nested_tensor=False)

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def embed_peaks(self, batch: PeakBatch) -> torch.Tensor:
        return self.peak_encoder(batch.mz, batch.intensity)

    def forward(self, batch: PeakBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch

        Returns:
            (per-peak memory of shape (batch, peaks, d_model), pooled embeddings (batch, d_model))
        """
        peaks = self.embed_peaks(batch)
        memory = self.transformer(peaks, src_key_padding_mask=~batch.mask)
        return memory, mean_pool(memory, batch.mask)

    def embed(
        self, spectra: Iterable[Spectrum], batch_size: int = 64, preprocess_cfg: Optional[PreprocessConfig] = None
    ) -> EmbeddingMatrix:
        return embed_spectra(self, spectra, preprocess_cfg, batch_size)


def mean_pool(memory: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean over valid positions only"""
    weights = mask.to(memory.dtype).unsqueeze(-1)
    return (memory * weights).sum(dim=1) / weights.sum(dim=1)


def check_finite_gradients(module: nn.Module, prefix: str = "") -> None:
    """Raise NumericError naming the first parameter with a non-finite gradient"""
    for name, param in module.named_parameters():
        if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
            raise NumericError(f"Non-finite gradient for parameter {prefix}{name}")


def parameter_gradients(loss: torch.Tensor, module: nn.Module) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter

    Parameters the loss does not depend on get zero gradients.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    result: Dict[str, torch.Tensor] = {}
    for (name, param), grad in zip(named, grads):
        grad = torch.zeros_like(param) if grad is None else grad
        if not bool(torch.isfinite(grad).all()):
            raise NumericError(f"Non-finite gradient for parameter {name}")
        result[name] = grad
    return result


def embed_spectra(
    encoder: SpectrumEncoder,
    spectra: Iterable[Spectrum],
    preprocess_cfg: Optional[PreprocessConfig] = None,
    batch_size: int = 64,
) -> EmbeddingMatrix:
    """Frozen-encoder pooled embeddings; spectra with no usable peaks are skipped"""
    processed: List[ProcessedSpectrum] = []
    rows: List[Tuple[str, str]] = []
    for s in spectra:
        try:
            processed.append(preprocess_spectrum(s, preprocess_cfg))
        except EmptySpectrum:
            logger.warning(f"Skipping spectrum {s.scan_id}: no usable peaks")
            continue
        rows.append(s.key)
    dtype = next(encoder.parameters()).dtype
    chunks = []
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        for start in range(0, len(processed), batch_size):
            _, pooled = encoder(collate(processed[start : start + batch_size], dtype=dtype))
            chunks.append(pooled.to(torch.float32).cpu().numpy())
    encoder.train(was_training)
    data = np.concatenate(chunks) if chunks else np.zeros((0, encoder.d_model), dtype=np.float32)
    return EmbeddingMatrix(data, rows)


# Checkpoints


def save_checkpoint(state: Mapping[str, torch.Tensor], config: Mapping[str, Any]) -> bytes:
    """Serialize named tensors (as float32) and a JSON config block"""
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(config_bytes)), config_bytes]
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        array = tensor.detach().cpu().to(torch.float32).numpy()
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"Checkpoint truncated at byte {self.offset} (needed {n} more bytes)")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(data: bytes) -> Tuple[Dict[str, Any], "OrderedDict[str, torch.Tensor]"]:
    """Inverse of save_checkpoint

    Returns:
        (config dict, ordered name -> float32 tensor mapping)
    """
    reader = _Reader(data)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("Not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}")
    try:
        config = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Corrupt checkpoint config block: {e}")
    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        if name in state:
            raise FormatError(f"Tensor {name!r} appears twice in checkpoint")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(values.astype(np.float32))
    if reader.offset != len(data):
        raise FormatError(f"{len(data) - reader.offset} trailing bytes after checkpoint records")
    return config, state


def load_state(
    module: nn.Module, state: Mapping[str, torch.Tensor], prefix: str = "", foreign: Sequence[str] = ()
) -> None:
    """Copy tensors named `prefix + param` into module, checking names and shapes

    Any other tensor under `prefix` is rejected unless it falls under one of the `foreign` prefixes.
    """
    expected = module.state_dict()
    for name, target in expected.items():
        key = prefix + name
        if key not in state:
            raise FormatError(f"Checkpoint is missing tensor {key!r}")
        if tuple(state[key].shape) != tuple(target.shape):
            raise FormatError(f"Tensor {key!r} has shape {tuple(state[key].shape)}, expected {tuple(target.shape)}")
    unexpected = [
        key for key in state
        if key.startswith(prefix) and key[len(prefix):] not in expected and not key.startswith(tuple(foreign))
    ]
    if unexpected:
        raise FormatError(f"Checkpoint has unexpected tensor {unexpected[0]!r}")
    module.load_state_dict({name: state[prefix + name].to(target.dtype) for name, target in expected.items()})


def encoder_checkpoint(encoder: SpectrumEncoder) -> bytes:
    state = OrderedDict((f"encoder.{k}", v) for k, v in encoder.state_dict().items())
    return save_checkpoint(state, {"encoder": encoder.config.model_dump()})


def restore_encoder(data: bytes, expected: Optional[EncoderConfig] = None) -> SpectrumEncoder:
    """Rebuild a SpectrumEncoder from any checkpoint that carries an encoder section"""
    config, state = load_checkpoint(data)
    if "encoder" not in config:
        raise FormatError("Checkpoint has no encoder configuration")
    try:
        cfg = EncoderConfig(**config["encoder"])
    except ValueError as e:
        raise FormatError(f"Invalid encoder configuration in checkpoint: {e}")
    if expected is not None:
        for field_name, value in expected.model_dump().items():
            if config["encoder"].get(field_name) != value:
                raise FormatError(
                    f"Checkpoint encoder {field_name}={config['encoder'].get(field_name)} does not match expected {value}"
                )
    encoder = SpectrumEncoder(cfg)
    load_state(encoder, state, prefix="encoder.")
    return encoder


def gradient_check(
    fn, inputs: Sequence[torch.Tensor], eps: float = 1e-4, rtol: float = 1e-4, atol: float = 1e-6
) -> bool:
    """Compare analytic and central-difference gradients of fn in float64

    Raises:
        NumericError: a gradient disagrees with its finite-difference estimate
    """
    inputs = tuple(t.detach().to(torch.float64).requires_grad_(True) for t in inputs)
    try:
        return torch.autograd.gradcheck(fn, inputs, eps=eps, rtol=rtol, atol=atol)
    except RuntimeError as e:
        raise NumericError(f"Gradient check failed: {e}")
