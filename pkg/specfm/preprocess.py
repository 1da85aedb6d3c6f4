"""Spectrum conditioning: encoder inputs, binned vectors and oxonium-ion features"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .config import PreprocessConfig
from .errors import ConfigError, EmptySpectrum
from .ms_io import Spectrum

logger = logging.getLogger(__name__)

DEFAULT_OXONIUM_TABLE = Path(__file__).parent / "data" / "oxonium_ions.tsv"
OXONIUM_138 = 138.0550
OXONIUM_144 = 144.0655
OXONIUM_TABLE_SIZE = 54


@dataclass(frozen=True, eq=False)
class ProcessedSpectrum:
    """Encoder-ready peaks: intensities square-rooted and scaled to unit L2 norm"""

    mz: np.ndarray
    intensity: np.ndarray
    precursor_mz: float
    precursor_charge: int

    @property
    def n_peaks(self) -> int:
        return int(self.mz.size)


@dataclass(frozen=True, eq=False)
class OxoniumTable:
    """Ordered reference oxonium ions; order defines the feature index"""

    names: Tuple[str, ...]
    mz: np.ndarray

    def __post_init__(self):
        mz = np.asarray(self.mz, dtype=np.float64)
        object.__setattr__(self, "mz", mz)
        if len(self.names) != mz.size:
            raise ConfigError("Oxonium table names and m/z values differ in length")
        if mz.size != OXONIUM_TABLE_SIZE:
            raise ConfigError(f"Oxonium table must have {OXONIUM_TABLE_SIZE} ions, got {mz.size}")
        if np.any(np.diff(mz) <= 0):
            raise ConfigError("Oxonium table m/z values must be strictly increasing")
        for ref in (OXONIUM_138, OXONIUM_144):
            if np.min(np.abs(mz - ref)) > 1e-3:
                raise ConfigError(f"Oxonium table lacks the {ref} ion")

    def __len__(self) -> int:
        return int(self.mz.size)

    @property
    def index_138(self) -> int:
        return int(np.argmin(np.abs(self.mz - OXONIUM_138)))

    @property
    def index_144(self) -> int:
        return int(np.argmin(np.abs(self.mz - OXONIUM_144)))


def load_oxonium_table(path: Optional[Union[str, Path]] = None) -> OxoniumTable:
    """Read a `name\\tmz` oxonium table; defaults to the shipped 54-ion list"""
    path = Path(path) if path else DEFAULT_OXONIUM_TABLE
    names, values = [], []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if header != ["name", "mz"]:
            raise ConfigError(f"{path}: expected header 'name\\tmz', got {header}")
        for row in reader:
            if not row:
                continue
            try:
                names.append(row[0])
                values.append(float(row[1]))
            except (IndexError, ValueError):
                raise ConfigError(f"{path}: bad oxonium row {row}")
    return OxoniumTable(tuple(names), np.asarray(values))


def _condition(
    mz: np.ndarray, intensity: np.ndarray, cfg: PreprocessConfig, sqrt: bool, scan_id: str = ""
) -> Tuple[np.ndarray, np.ndarray]:
    keep = (mz >= cfg.encoder_mz_min) & (mz <= cfg.encoder_mz_max)
    mz, intensity = mz[keep], intensity[keep]
    if mz.size == 0:
        raise EmptySpectrum(f"No peaks within [{cfg.encoder_mz_min}, {cfg.encoder_mz_max}] m/z {scan_id}".strip())
    if mz.size > cfg.max_peaks:
        # highest intensity first, ascending m/z among ties
        top = np.lexsort((mz, -intensity))[: cfg.max_peaks]
        top.sort()
        mz, intensity = mz[top], intensity[top]
    if sqrt:
        intensity = np.sqrt(intensity)
    norm = np.linalg.norm(intensity)
    if norm == 0:
        raise EmptySpectrum(f"All surviving peaks have zero intensity {scan_id}".strip())
    return mz.copy(), intensity / norm


def preprocess_spectrum(
    s: Union[Spectrum, ProcessedSpectrum], cfg: Optional[PreprocessConfig] = None
) -> ProcessedSpectrum:
    """Range-filter, keep the top peaks, sqrt-transform and L2-normalize intensities

    An already processed spectrum is only re-filtered and re-normalized,
    so the transform is idempotent.
    """
    cfg = cfg or PreprocessConfig()
    if isinstance(s, ProcessedSpectrum):
        mz, intensity = _condition(s.mz, s.intensity, cfg, sqrt=False)
    else:
        mz, intensity = _condition(s.mz, s.intensity, cfg, sqrt=True, scan_id=s.scan_id)
    return ProcessedSpectrum(mz, intensity, float(s.precursor_mz), int(s.precursor_charge))


def bin_spectrum(s: Spectrum, cfg: Optional[PreprocessConfig] = None) -> np.ndarray:
    """Sum raw intensities into equal-width m/z bins over [bin_lo, bin_hi)"""
    cfg = cfg or PreprocessConfig()
    vector = np.zeros(cfg.n_bins, dtype=np.float64)
    keep = (s.mz >= cfg.bin_lo) & (s.mz < cfg.bin_hi)
    if not np.any(keep):
        return vector
    index = np.floor((s.mz[keep] - cfg.bin_lo) / cfg.bin_width).astype(np.int64)
    np.clip(index, 0, cfg.n_bins - 1, out=index)
    np.add.at(vector, index, s.intensity[keep])
    return vector


def bin_spectra(spectra, cfg: Optional[PreprocessConfig] = None) -> np.ndarray:
    cfg = cfg or PreprocessConfig()
    if not spectra:
        return np.zeros((0, cfg.n_bins))
    return np.stack([bin_spectrum(s, cfg) for s in spectra])


def extract_oxonium(
    s: Spectrum, table: OxoniumTable, cfg: Optional[PreprocessConfig] = None
) -> Tuple[np.ndarray, float]:
    """Oxonium intensity vector and the 144 / (138 + 144) O-glycan score

    Returns:
        (vector with one max-intensity entry per reference ion, score in [0, 1))
    """
    cfg = cfg or PreprocessConfig()
    vector = np.zeros(len(table), dtype=np.float64)
    if s.n_peaks:
        order = np.argsort(s.mz, kind="stable")
        mz, intensity = s.mz[order], s.intensity[order]
        tolerance = np.maximum(cfg.oxonium_tolerance_ppm * table.mz * 1e-6, cfg.oxonium_tolerance_floor)
        lo = np.searchsorted(mz, table.mz - tolerance, side="left")
        hi = np.searchsorted(mz, table.mz + tolerance, side="right")
        for i, (a, b) in enumerate(zip(lo, hi)):
            if b > a:
                vector[i] = intensity[a:b].max()
    i138 = vector[table.index_138]
    i144 = vector[table.index_144]
    score = float(i144 / (i138 + i144 + 1e-9))
    return vector, score
