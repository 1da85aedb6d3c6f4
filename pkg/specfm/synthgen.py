"""Deterministic synthetic labeled spectra for the quality, chimera, phospho, glyco and de novo tasks

Every record draws from its own counter-based generator keyed by (seed, index),
so records are independent of generation order.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np

from .chem import (
    PHOSPHO_DELTA,
    PHOSPHO_NEUTRAL_LOSS,
    PROTON_MASS,
    Peptide,
    fragment_mzs,
    neutral_loss_mz,
    parse_peptide,
    peptide_mass,
    phospho_sites,
    precursor_mz,
)
from .config import SynthConfig
from .errors import ConfigError
from .ms_io import Spectrum, write_labels, write_mgf
from .schemas import LabelRecord, PlantedIon, SynthProvenance, Task

logger = logging.getLogger(__name__)

OXONIUM_204 = ("HexNAc", 204.0867)
OXONIUM_138 = ("HexNAc-C2H6O3", 138.0550)
OXONIUM_366 = ("HexHexNAc", 366.1395)
OXONIUM_144 = ("HexNAc-C2H4O2", 144.0655)
NEUTRAL_LOSS = "precursor-H3PO4"
PHOSPHATE_ION = ("H4PO4", PHOSPHO_NEUTRAL_LOSS + PROTON_MASS)

FRAGMENT_INTENSITY = (0.1, 1.0)
NOISE_INTENSITY = (0.02, 0.5)
NOISE_EXCLUSION = 0.02
MATCH_TOLERANCE = 1e-6
MAX_RESAMPLES = 100


@dataclass
class SynthRecord:
    spectrum: Spectrum
    label: Optional[LabelRecord]
    provenance: SynthProvenance


def record_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed % 2**64, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_peptide(rng: np.random.Generator, cfg: SynthConfig) -> Peptide:
    length = int(rng.integers(cfg.peptide_len_min, cfg.peptide_len_max + 1))
    alphabet = list(cfg.residues)
    return Peptide(tuple(alphabet[i] for i in rng.integers(0, len(alphabet), size=length)))


def _fragments(rng: np.random.Generator, peptide: Peptide, scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    mz = np.array([ion[2] for ion in fragment_mzs(peptide)], dtype=np.float64)
    intensity = rng.uniform(*FRAGMENT_INTENSITY, size=mz.size) * scale
    return mz, intensity


def _noise(
    rng: np.random.Generator, count: int, cfg: SynthConfig, planted: List[PlantedIon]
) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform noise peaks kept clear of the planted ions"""
    avoid = np.array([ion.mz for ion in planted], dtype=np.float64)
    found: List[float] = []
    for _ in range(MAX_RESAMPLES):
        if len(found) >= count:
            break
        candidates = rng.uniform(cfg.noise_mz_lo, cfg.noise_mz_hi, size=count - len(found))
        if avoid.size:
            clear = np.all(np.abs(candidates[:, None] - avoid[None, :]) > NOISE_EXCLUSION, axis=1)
            candidates = candidates[clear]
        found.extend(candidates.tolist())
    if len(found) < count:
        raise ConfigError("Cannot place noise peaks outside the planted-ion exclusion windows")
    mz = np.asarray(found[:count], dtype=np.float64)
    return mz, rng.uniform(*NOISE_INTENSITY, size=count)


def _noise_count(rng: np.random.Generator, cfg: SynthConfig, half: Optional[str] = None) -> int:
    lo, hi = cfg.noise_peaks_min, cfg.noise_peaks_max
    mid = (lo + hi) // 2
    if half == "low":
        hi = mid
    elif half == "high":
        lo = mid
    return int(rng.integers(lo, hi + 1))


def _phospho_peptide(rng: np.random.Generator, cfg: SynthConfig) -> Tuple[Peptide, int]:
    """Peptide with one phosphorylated S/T/Y, resampling the sequence when none exists"""
    for _ in range(MAX_RESAMPLES):
        peptide = _draw_peptide(rng, cfg)
        sites = phospho_sites(peptide.sequence)
        if sites:
            site = int(sites[int(rng.integers(0, len(sites)))])
            return Peptide(peptide.sequence, ((site, PHOSPHO_DELTA),)), site
    raise ConfigError(f"No S/T/Y site after {MAX_RESAMPLES} peptide draws; check synth.residues and lengths")


def _phospho_ions(
    rng: np.random.Generator, cfg: SynthConfig, peptide: Peptide, site: int, fragment_intensity: np.ndarray
) -> List[PlantedIon]:
    """H3PO4-loss partners of every site-carrying b/y fragment, plus the phosphate marker ion"""
    n = len(peptide.sequence)
    ions = []
    for (series, k, mz), parent in zip(fragment_mzs(peptide), fragment_intensity):
        carries_site = site < k if series == "b" else site >= n - k
        if carries_site:
            intensity = min(1.0, parent * rng.uniform(1.0, 2.0))
            ions.append(PlantedIon(name=f"{series}{k}-H3PO4", mz=mz - PHOSPHO_NEUTRAL_LOSS, intensity=float(intensity)))
    if rng.random() < cfg.phosphate_ion_prob:
        ions.append(PlantedIon(name=PHOSPHATE_ION[0], mz=PHOSPHATE_ION[1], intensity=float(rng.uniform(*FRAGMENT_INTENSITY))))
    return ions


def _glyco_ions(rng: np.random.Generator, cfg: SynthConfig, o_linked: bool) -> List[PlantedIon]:
    i204, i138, i366 = rng.uniform(*FRAGMENT_INTENSITY, size=3)
    ions = [PlantedIon(name=OXONIUM_204[0], mz=OXONIUM_204[1], intensity=float(i204))]
    if o_linked:
        i144 = min(1.0, i138 * rng.uniform(0.8, 1.2))
        # elongated core 2 glycans carry an N-like elevated 138 ion
        if rng.random() < cfg.core2_rate:
            i138 = min(1.0, i138 * rng.uniform(2.0, 4.0))
        ions.append(PlantedIon(name=OXONIUM_144[0], mz=OXONIUM_144[1], intensity=float(i144)))
    ions.append(PlantedIon(name=OXONIUM_138[0], mz=OXONIUM_138[1], intensity=float(i138)))
    ions.append(PlantedIon(name=OXONIUM_366[0], mz=OXONIUM_366[1], intensity=float(i366)))
    return ions


def gen_record(cfg: SynthConfig, index: int) -> SynthRecord:
    """One synthetic spectrum with its label and provenance"""
    rng = record_rng(cfg.seed, index)
    task = cfg.task
    positive = bool(rng.random() < cfg.rate)
    charge = int(cfg.charges[int(rng.integers(0, len(cfg.charges)))])
    planted: List[PlantedIon] = []
    peptides: List[Peptide] = []
    site: Optional[int] = None
    keep_fraction = 1.0
    alpha: Optional[float] = None
    mz_parts: List[np.ndarray] = []
    intensity_parts: List[np.ndarray] = []

    if task in ("phospho", "denovo") and positive:
        peptide, site = _phospho_peptide(rng, cfg)
    else:
        peptide = _draw_peptide(rng, cfg)
    peptides.append(peptide)
    precursor = precursor_mz(peptide_mass(peptide), charge)

    mz, intensity = _fragments(rng, peptide)
    if task == "quality":
        if positive:
            keep_fraction = float(rng.uniform(cfg.keep_high_min, cfg.keep_high_max))
        else:
            keep_fraction = float(rng.uniform(cfg.keep_low_min, cfg.keep_low_max))
        n_keep = int(round(keep_fraction * mz.size))
        kept = np.sort(rng.choice(mz.size, size=n_keep, replace=False)) if mz.size else np.zeros(0, dtype=np.int64)
        mz, intensity = mz[kept], intensity[kept]
    mz_parts.append(mz)
    intensity_parts.append(intensity)

    if task == "chimera" and positive:
        alpha = float(rng.uniform(cfg.chimera_alpha_min, cfg.chimera_alpha_max))
        second = _draw_peptide(rng, cfg)
        peptides.append(second)
        second_mz, second_intensity = _fragments(rng, second, alpha)
        mz_parts.append(second_mz)
        intensity_parts.append(second_intensity)

    if task == "phospho" and positive:
        planted.extend(_phospho_ions(rng, cfg, peptide, site, intensity_parts[0]))
    if task == "phospho" and positive and rng.random() < cfg.neutral_loss_prob:
        loss_mz = neutral_loss_mz(precursor, charge)
        planted.append(PlantedIon(name=NEUTRAL_LOSS, mz=loss_mz, intensity=float(rng.uniform(*FRAGMENT_INTENSITY))))

    if task == "glyco":
        planted.extend(_glyco_ions(rng, cfg, positive))

    noise_count = 0
    if task != "denovo":
        half = ("low" if positive else "high") if task == "quality" else None
        noise_count = _noise_count(rng, cfg, half)
        avoid = planted
        if task == "glyco":
            # neither class gets a noise peak at the O-specific ion
            avoid = planted + [PlantedIon(name=OXONIUM_144[0], mz=OXONIUM_144[1], intensity=0.0)]
        noise_mz, noise_intensity = _noise(rng, noise_count, cfg, avoid)
        mz_parts.append(noise_mz)
        intensity_parts.append(noise_intensity)

    mz_parts.append(np.array([ion.mz for ion in planted], dtype=np.float64))
    intensity_parts.append(np.array([ion.intensity for ion in planted], dtype=np.float64))

    run_id = f"synth_{task}_{cfg.seed}"
    scan_id = f"scan={index}"
    spectrum = Spectrum.from_peaks(
        run_id,
        scan_id,
        precursor,
        charge,
        np.concatenate(mz_parts),
        np.concatenate(intensity_parts),
        peptide=peptide.to_string() if task == "denovo" else None,
    )
    label = None if task == "denovo" else LabelRecord(run_id=run_id, scan_id=scan_id, task=Task(task), label=int(positive))
    provenance = SynthProvenance(
        index=index,
        task=task,
        label=int(positive),
        peptides=[p.to_string() for p in peptides],
        charge=charge,
        phospho_site=site,
        keep_fraction=keep_fraction,
        noise_count=noise_count,
        chimera_alpha=alpha,
        planted=planted,
    )
    return SynthRecord(spectrum, label, provenance)


def gen_dataset(cfg: SynthConfig) -> List[SynthRecord]:
    """Generate cfg.n records in index order"""
    records = [gen_record(cfg, i) for i in range(cfg.n)]
    n_pos = sum(r.provenance.label for r in records)
    logger.info(f"Generated {len(records)} synthetic {cfg.task} spectra ({n_pos} positive, seed {cfg.seed})")
    return records


def _has_peak(spectrum: Spectrum, mz: float) -> bool:
    if spectrum.n_peaks == 0:
        return False
    i = int(np.searchsorted(spectrum.mz, mz - MATCH_TOLERANCE, side="left"))
    return i < spectrum.n_peaks and abs(spectrum.mz[i] - mz) <= MATCH_TOLERANCE


def _derived_label(p: SynthProvenance) -> int:
    if p.task == "quality":
        return int(p.keep_fraction >= 0.5)
    if p.task == "chimera":
        return int(len(p.peptides) == 2)
    if p.task in ("phospho", "denovo"):
        return int(p.phospho_site is not None)
    if p.task == "glyco":
        return int(any(ion.name == OXONIUM_144[0] for ion in p.planted))
    raise ConfigError(f"Unknown synthetic task {p.task!r}")


def verify_record(record: SynthRecord) -> bool:
    """Re-derive the label from provenance and check planted peaks are present"""
    p = record.provenance
    s = record.spectrum
    if _derived_label(p) != p.label:
        return False
    if record.label is not None and (record.label.label != p.label or record.label.key[:2] != s.key):
        return False
    if p.task == "denovo" and record.label is not None:
        return False
    for ion in p.planted:
        if not _has_peak(s, ion.mz):
            return False
    peptide = parse_peptide(p.peptides[0])
    if p.phospho_site is not None and peptide.sequence[p.phospho_site] not in "STY":
        return False
    if p.task == "denovo":
        if s.peptide != p.peptides[0]:
            return False
        fragments = np.sort(np.array([ion[2] for ion in fragment_mzs(peptide)]))
        for mz in s.mz:
            i = int(np.searchsorted(fragments, mz - MATCH_TOLERANCE))
            if i >= fragments.size or abs(fragments[i] - mz) > MATCH_TOLERANCE:
                return False
    return True


def write_dataset(records: Iterable[SynthRecord]) -> Tuple[bytes, str, str]:
    """(MGF bytes, label TSV text, provenance JSON-lines text), sorted by record index"""
    records = sorted(records, key=lambda r: r.provenance.index)
    mgf = write_mgf(r.spectrum for r in records)
    labels = write_labels(r.label for r in records if r.label is not None)
    provenance = "".join(r.provenance.model_dump_json() + "\n" for r in records)
    return mgf, labels, provenance


def save_dataset(
    records: Iterable[SynthRecord],
    mgf_path: Union[str, Path],
    labels_path: Optional[Union[str, Path]] = None,
    provenance_path: Optional[Union[str, Path]] = None,
) -> None:
    mgf, labels, provenance = write_dataset(records)
    Path(mgf_path).write_bytes(mgf)
    if labels_path is not None:
        Path(labels_path).write_text(labels, encoding="utf-8")
    if provenance_path is not None:
        Path(provenance_path).write_text(provenance, encoding="utf-8")


def read_provenance(text: str) -> List[SynthProvenance]:
    return [SynthProvenance.model_validate_json(line) for line in text.splitlines() if line.strip()]
