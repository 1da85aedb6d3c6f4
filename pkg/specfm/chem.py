"""Monoisotopic masses, peptide mass arithmetic and b/y fragment generation"""

import re
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .errors import InvalidCharge, InvalidPeptide

PROTON_MASS = 1.007276
WATER_MASS = 18.010565
PHOSPHO_DELTA = 79.96633
# H3PO4 lost from phosphorylated precursors under HCD
PHOSPHO_NEUTRAL_LOSS = 97.9769

RESIDUE_MASSES: Dict[str, float] = {
    "G": 57.02146,
    "A": 71.03711,
    "S": 87.03203,
    "P": 97.05276,
    "V": 99.06841,
    "T": 101.04768,
    "C": 103.00919,
    "L": 113.08406,
    "I": 113.08406,
    "N": 114.04293,
    "D": 115.02694,
    "Q": 128.05858,
    "K": 128.09496,
    "E": 129.04259,
    "M": 131.04049,
    "H": 137.05891,
    "F": 147.06841,
    "R": 156.10111,
    "Y": 163.06333,
    "W": 186.07931,
}

PHOSPHO_SITES = frozenset("STY")

_TOKEN = re.compile(r"([A-Z])(\[([+-]?\d+(?:\.\d+)?)\])?")


@dataclass(frozen=True)
class Peptide:
    """Amino-acid sequence with additive per-residue modification deltas

    An empty sequence is representable (a decoder may emit nothing) but every
    mass operation rejects it.
    """

    sequence: Tuple[str, ...]
    mods: Tuple[Tuple[int, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "sequence", tuple(self.sequence))
        object.__setattr__(self, "mods", tuple(sorted((int(p), float(d)) for p, d in self.mods)))
        for aa in self.sequence:
            if aa not in RESIDUE_MASSES:
                raise InvalidPeptide(f"Unknown residue {aa!r}")
        for position, _ in self.mods:
            if not 0 <= position < len(self.sequence):
                raise InvalidPeptide(f"Modification position {position} outside peptide of length {len(self.sequence)}")

    def __len__(self) -> int:
        return len(self.sequence)

    def residue_deltas(self) -> List[float]:
        """Per-position sum of modification deltas"""
        deltas = [0.0] * len(self.sequence)
        for position, delta in self.mods:
            deltas[position] += delta
        return deltas

    def residue_masses(self) -> List[float]:
        return [RESIDUE_MASSES[aa] + d for aa, d in zip(self.sequence, self.residue_deltas())]

    def to_string(self) -> str:
        """Bracketed-delta notation, e.g. `AS[+79.96633]G`"""
        deltas = self.residue_deltas()
        modified = {p for p, _ in self.mods}
        return "".join(
            f"{aa}[{deltas[i]:+.5f}]" if i in modified else aa for i, aa in enumerate(self.sequence)
        )

    def __str__(self) -> str:
        return self.to_string()


def parse_peptide(text: str) -> Peptide:
    """Parse plain or bracketed-delta peptide notation

    Args:
        text: e.g. "PEPTIDE" or "PEPS[+79.96633]IDE"

    Returns:
        Peptide with modifications attached to the preceding residue
    """
    text = text.strip()
    sequence: List[str] = []
    mods: List[Tuple[int, float]] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            raise InvalidPeptide(f"Cannot parse peptide {text!r} at offset {pos}")
        sequence.append(match.group(1))
        if match.group(3) is not None:
            mods.append((len(sequence) - 1, float(match.group(3))))
        pos = match.end()
    return Peptide(tuple(sequence), tuple(mods))


def peptide_mass(p: Peptide) -> float:
    """Neutral monoisotopic mass: residues + modification deltas + water"""
    if not p.sequence:
        raise InvalidPeptide("Peptide sequence must be non-empty")
    return sum(p.residue_masses()) + WATER_MASS


def precursor_mz(neutral_mass: float, z: int) -> float:
    """m/z of a neutral mass carrying z protons"""
    if z < 1:
        raise InvalidCharge(f"Charge must be a positive integer, got {z}")
    if neutral_mass <= 0:
        raise InvalidPeptide(f"Neutral mass must be positive, got {neutral_mass}")
    return (neutral_mass + z * PROTON_MASS) / z


def fragment_mzs(p: Peptide, frag_charge: int = 1) -> List[Tuple[str, int, float]]:
    """Theoretical b and y ion m/z values

    Args:
        p: Peptide
        frag_charge: Fragment charge state (>= 1)

    Returns:
        List of (series, index, m/z); b ions by prefix length, then y ions by suffix length
    """
    if frag_charge < 1:
        raise InvalidCharge(f"Fragment charge must be a positive integer, got {frag_charge}")
    if not p.sequence:
        raise InvalidPeptide("Peptide sequence must be non-empty")
    masses = p.residue_masses()
    n = len(masses)
    z = frag_charge
    b_ions: List[Tuple[str, int, float]] = []
    y_ions: List[Tuple[str, int, float]] = []
    prefix = 0.0
    total = sum(masses)
    for i in range(1, n):
        prefix += masses[i - 1]
        suffix = total - prefix
        b_ions.append(("b", i, (prefix + z * PROTON_MASS) / z))
        y_ions.append(("y", n - i, (suffix + WATER_MASS + z * PROTON_MASS) / z))
    y_ions.sort(key=lambda ion: ion[1])
    return b_ions + y_ions


def neutral_loss_mz(precursor: float, z: int, loss: float = PHOSPHO_NEUTRAL_LOSS) -> float:
    """Precursor m/z after losing a neutral fragment of the given mass"""
    if z < 1:
        raise InvalidCharge(f"Charge must be a positive integer, got {z}")
    return precursor - loss / z


def phospho_sites(sequence: Sequence[str]) -> List[int]:
    """Positions that can carry a phosphate (S/T/Y)"""
    return [i for i, aa in enumerate(sequence) if aa in PHOSPHO_SITES]
