"""Spectrum, label and embedding file formats: MGF, mzML subset, label TSV, SEMB"""

import base64
import binascii
import csv
import io
import logging
import struct
import xml.etree.ElementTree as ET
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DuplicateLabel, FormatError, ParseError
from .schemas import LabelRecord, Task

logger = logging.getLogger(__name__)

ByteSource = Union[bytes, bytearray, BinaryIO]

LABEL_HEADER = ["run_id", "scan_id", "task", "label"]
EMBEDDING_MAGIC = b"SEMB"
EMBEDDING_VERSION = 1
_EMBEDDING_HEADER = struct.Struct("<4sIII")

# PSI-MS accessions understood by the mzML reader
_MS_LEVEL = "MS:1000511"
_SELECTED_ION_MZ = "MS:1000744"
_CHARGE_STATE = "MS:1000041"
_MZ_ARRAY = "MS:1000514"
_INTENSITY_ARRAY = "MS:1000515"
_FLOAT32 = "MS:1000521"
_FLOAT64 = "MS:1000523"
_ZLIB = "MS:1000574"
_NO_COMPRESSION = "MS:1000576"
_UNSUPPORTED_ENCODINGS = {
    "MS:1000519": "32-bit integer",
    "MS:1000522": "64-bit integer",
    "MS:1002312": "MS-Numpress linear prediction",
    "MS:1002313": "MS-Numpress positive integer",
    "MS:1002314": "MS-Numpress short logged float",
}


class Peak(NamedTuple):
    mz: float
    intensity: float


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One MS/MS scan: precursor plus a peak list sorted ascending by m/z

    Charge 0 means unknown. `peptide` holds an optional sequence annotation
    (bracketed-delta notation) for de novo training data.
    """

    run_id: str
    scan_id: str
    precursor_mz: float
    precursor_charge: int
    mz: np.ndarray
    intensity: np.ndarray
    peptide: Optional[str] = None

    def __post_init__(self):
        mz = np.ascontiguousarray(self.mz, dtype=np.float64)
        intensity = np.ascontiguousarray(self.intensity, dtype=np.float64)
        if mz.shape != intensity.shape or mz.ndim != 1:
            raise ParseError("m/z and intensity arrays differ in shape", spectrum_id=self.scan_id)
        if not (np.all(np.isfinite(mz)) and np.all(np.isfinite(intensity))):
            raise ParseError("non-finite peak value", spectrum_id=self.scan_id)
        if np.any(mz <= 0) or np.any(intensity < 0):
            raise ParseError("peaks need m/z > 0 and intensity >= 0", spectrum_id=self.scan_id)
        if mz.size > 1 and np.any(np.diff(mz) < 0):
            raise ParseError("peaks must be sorted by m/z", spectrum_id=self.scan_id)
        if self.precursor_charge < 0:
            raise ParseError("negative precursor charge", spectrum_id=self.scan_id)
        mz.setflags(write=False)
        intensity.setflags(write=False)
        object.__setattr__(self, "mz", mz)
        object.__setattr__(self, "intensity", intensity)

    @classmethod
    def from_peaks(
        cls,
        run_id: str,
        scan_id: str,
        precursor_mz: float,
        precursor_charge: int,
        mz: Sequence[float],
        intensity: Sequence[float],
        peptide: Optional[str] = None,
    ) -> "Spectrum":
        """Build a spectrum from unsorted peaks (stable sort by m/z)"""
        mz = np.asarray(mz, dtype=np.float64)
        intensity = np.asarray(intensity, dtype=np.float64)
        if mz.shape != intensity.shape:
            raise ParseError(f"{mz.size} m/z values but {intensity.size} intensities", spectrum_id=scan_id)
        order = np.argsort(mz, kind="stable")
        return cls(run_id, scan_id, float(precursor_mz), int(precursor_charge), mz[order], intensity[order], peptide)

    @property
    def peaks(self) -> List[Peak]:
        return [Peak(float(m), float(i)) for m, i in zip(self.mz, self.intensity)]

    @property
    def n_peaks(self) -> int:
        return int(self.mz.size)

    @property
    def key(self) -> Tuple[str, str]:
        return (self.run_id, self.scan_id)

    def same_as(self, other: "Spectrum") -> bool:
        return (
            self.run_id == other.run_id
            and self.scan_id == other.scan_id
            and self.precursor_mz == other.precursor_mz
            and self.precursor_charge == other.precursor_charge
            and self.peptide == other.peptide
            and np.array_equal(self.mz, other.mz)
            and np.array_equal(self.intensity, other.intensity)
        )


@dataclass
class EmbeddingMatrix:
    """Row-major float32 embeddings with a (run_id, scan_id) row index"""

    data: np.ndarray
    rows: List[Tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise FormatError(f"Embedding data must be 2-D, got shape {self.data.shape}")
        if len(self.rows) != self.data.shape[0]:
            raise FormatError(f"Row index has {len(self.rows)} entries for {self.data.shape[0]} rows")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("Embedding matrix contains non-finite values")

    @property
    def n_rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


def _read_bytes(source: ByteSource) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    return source.read()


def decode_text(data: bytes, source: str = "input") -> str:
    """UTF-8 decode; an invalid byte becomes a ParseError carrying its offset and line"""
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        line = data.count(b"\n", 0, e.start) + 1
        raise ParseError(f"{source} is not valid UTF-8 at byte offset {e.start}", line=line)


def read_text(path: Union[str, Path]) -> str:
    path = Path(path)
    return decode_text(path.read_bytes(), str(path))


# MGF


def _parse_charge(text: str, line: int) -> int:
    token = text.split(",")[0].strip().rstrip("+-")
    try:
        return int(token) if token else 0
    except ValueError:
        raise ParseError(f"Invalid CHARGE value {text!r}", line=line)


def parse_mgf(source: ByteSource, run_id: str = "") -> List[Spectrum]:
    """Parse MGF text into spectra

    Args:
        source: UTF-8 MGF bytes or binary stream
        run_id: Run identifier for blocks without a RUNID header

    Returns:
        One Spectrum per BEGIN IONS/END IONS block, peaks sorted by m/z
    """
    text = decode_text(_read_bytes(source), getattr(source, "name", "MGF input"))
    spectra: List[Spectrum] = []
    block: Optional[Dict[str, str]] = None
    block_start = 0
    mzs: List[float] = []
    intensities: List[float] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;!/":
            continue
        if line == "BEGIN IONS":
            if block is not None:
                raise ParseError("BEGIN IONS inside an open block", line=number)
            block, block_start, mzs, intensities = {}, number, [], []
            continue
        if block is None:
            continue
        if line == "END IONS":
            if "PEPMASS" not in block:
                raise ParseError("PEPMASS missing", line=block_start)
            try:
                precursor = float(block["PEPMASS"].split()[0])
            except (ValueError, IndexError):
                raise ParseError(f"Invalid PEPMASS {block['PEPMASS']!r}", line=block_start)
            charge = _parse_charge(block.get("CHARGE", ""), block_start)
            scan_id = block.get("TITLE", f"index={len(spectra)}")
            spectra.append(
                Spectrum.from_peaks(
                    block.get("RUNID", run_id), scan_id, precursor, charge, mzs, intensities, block.get("SEQ")
                )
            )
            block = None
            continue
        if "=" in line and not line[0].isdigit():
            key, value = line.split("=", 1)
            block[key.strip().upper()] = value.strip()
            continue
        parts = line.split()
        try:
            if len(parts) < 2:
                raise ValueError(line)
            mzs.append(float(parts[0]))
            intensities.append(float(parts[1]))
        except ValueError:
            raise ParseError(f"Non-numeric peak line {line!r}", line=number)
    if block is not None:
        raise ParseError("END IONS missing at end of file", line=block_start)
    logger.debug(f"Parsed {len(spectra)} MGF spectra")
    return spectra


def write_mgf(spectra: Iterable[Spectrum]) -> bytes:
    """Serialize spectra as MGF; floats use shortest round-trip text"""
    out = io.StringIO()
    for s in spectra:
        out.write("BEGIN IONS\n")
        out.write(f"TITLE={s.scan_id}\n")
        if s.run_id:
            out.write(f"RUNID={s.run_id}\n")
        out.write(f"PEPMASS={float(s.precursor_mz)!r}\n")
        if s.precursor_charge:
            out.write(f"CHARGE={s.precursor_charge}+\n")
        if s.peptide:
            out.write(f"SEQ={s.peptide}\n")
        for mz, intensity in zip(s.mz, s.intensity):
            out.write(f"{float(mz)!r} {float(intensity)!r}\n")
        out.write("END IONS\n\n")
    return out.getvalue().encode("utf-8")


# mzML


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _cv_params(elem: ET.Element) -> Dict[str, str]:
    return {
        child.get("accession", ""): child.get("value", "")
        for child in elem
        if _local(child.tag) == "cvParam"
    }


def _decode_array(array_elem: ET.Element, spectrum_id: str) -> Tuple[str, np.ndarray]:
    params = _cv_params(array_elem)
    for accession, name in _UNSUPPORTED_ENCODINGS.items():
        if accession in params:
            raise ParseError(f"Unsupported binary encoding: {name}", spectrum_id=spectrum_id)
    if _FLOAT64 in params:
        dtype = np.dtype("<f8")
    elif _FLOAT32 in params:
        dtype = np.dtype("<f4")
    else:
        raise ParseError("Binary array declares no supported float precision", spectrum_id=spectrum_id)
    if _MZ_ARRAY in params:
        kind = "mz"
    elif _INTENSITY_ARRAY in params:
        kind = "intensity"
    else:
        kind = "other"
    binary = next((c for c in array_elem if _local(c.tag) == "binary"), None)
    payload = (binary.text or "").strip() if binary is not None else ""
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as e:
        raise ParseError(f"base64 decode failed: {e}", spectrum_id=spectrum_id)
    if _ZLIB in params:
        try:
            raw = zlib.decompress(raw)
        except zlib.error as e:
            raise ParseError(f"zlib decompression failed: {e}", spectrum_id=spectrum_id)
    elif _NO_COMPRESSION not in params and raw:
        raise ParseError("Binary array declares no supported compression", spectrum_id=spectrum_id)
    if len(raw) % dtype.itemsize:
        raise ParseError(f"Binary payload of {len(raw)} bytes is not a whole number of values", spectrum_id=spectrum_id)
    return kind, np.frombuffer(raw, dtype=dtype).astype(np.float64)


def _spectrum_from_element(elem: ET.Element, run_id: str) -> Optional[Spectrum]:
    spectrum_id = elem.get("id", "")
    params = _cv_params(elem)
    if params.get(_MS_LEVEL) != "2":
        return None
    precursor_mz = 0.0
    charge = 0
    for ion in elem.iter():
        if _local(ion.tag) != "selectedIon":
            continue
        ion_params = _cv_params(ion)
        try:
            if _SELECTED_ION_MZ in ion_params:
                precursor_mz = float(ion_params[_SELECTED_ION_MZ])
            if _CHARGE_STATE in ion_params:
                charge = int(float(ion_params[_CHARGE_STATE]))
        except ValueError:
            raise ParseError("Invalid selected ion value", spectrum_id=spectrum_id)
        break
    arrays: Dict[str, np.ndarray] = {}
    for array_elem in elem.iter():
        if _local(array_elem.tag) == "binaryDataArray":
            kind, values = _decode_array(array_elem, spectrum_id)
            arrays[kind] = values
    if "mz" not in arrays or "intensity" not in arrays:
        raise ParseError("Spectrum lacks an m/z or intensity array", spectrum_id=spectrum_id)
    if arrays["mz"].size != arrays["intensity"].size:
        raise ParseError(
            f"Array length mismatch: {arrays['mz'].size} m/z vs {arrays['intensity'].size} intensities",
            spectrum_id=spectrum_id,
        )
    return Spectrum.from_peaks(run_id, spectrum_id, precursor_mz, charge, arrays["mz"], arrays["intensity"])


def parse_mzml(source: ByteSource, run_id: str = "") -> List[Spectrum]:
    """Parse the MS2 spectra of an mzML (or indexedmzML) document

    Args:
        source: mzML bytes or binary stream
        run_id: Fallback run identifier when the <run> element has no id

    Returns:
        MS level 2 spectra, peaks sorted by m/z, scan_id from the spectrum id
    """
    data = _read_bytes(source)
    spectra: List[Spectrum] = []
    skipped = 0
    current_run = run_id
    try:
        for event, elem in ET.iterparse(io.BytesIO(data), events=("start", "end")):
            tag = _local(elem.tag)
            if event == "start":
                if tag == "run":
                    current_run = elem.get("id") or run_id
                continue
            if tag != "spectrum":
                continue
            spectrum = _spectrum_from_element(elem, current_run)
            if spectrum is None:
                skipped += 1
            else:
                spectra.append(spectrum)
            elem.clear()
    except ET.ParseError as e:
        raise ParseError(f"Malformed mzML: {e}")
    if skipped:
        logger.debug(f"Skipped {skipped} non-MS2 spectra")
    return spectra


def read_spectra(path: Union[str, Path]) -> List[Spectrum]:
    """Read an MGF or mzML file, chosen by suffix; run id defaults to the file stem"""
    path = Path(path)
    suffix = path.suffix.lower()
    with open(path, "rb") as f:
        if suffix == ".mgf":
            spectra = parse_mgf(f, run_id=path.stem)
        elif suffix == ".mzml":
            spectra = parse_mzml(f, run_id=path.stem)
        else:
            raise ParseError(f"Unsupported spectrum file type: {path.suffix}")
    logger.info(f"Read {len(spectra)} spectra from {path}")
    return spectra


# Label TSV


def read_labels(source: Union[str, io.TextIOBase, Iterable[str]]) -> List[LabelRecord]:
    """Parse a `run_id\\tscan_id\\ttask\\tlabel` table

    Raises:
        ParseError: bad header, unknown task or non-binary label
        DuplicateLabel: repeated (run_id, scan_id, task)
    """
    lines = source.splitlines() if isinstance(source, str) else source
    reader = csv.reader(lines, delimiter="\t")
    header = next(reader, None)
    if header is None:
        raise ParseError("Label table is empty", line=1)
    if [h.strip() for h in header] != LABEL_HEADER:
        raise ParseError(f"Expected header {LABEL_HEADER}, got {header}", line=1)
    records: List[LabelRecord] = []
    seen = set()
    for number, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 4:
            raise ParseError(f"Expected 4 columns, got {len(row)}", line=number)
        run_id, scan_id, task, label = (cell.strip() for cell in row)
        if label not in ("0", "1"):
            raise ParseError(f"Label must be 0 or 1, got {label!r}", line=number)
        try:
            record = LabelRecord(run_id=run_id, scan_id=scan_id, task=Task(task), label=int(label))
        except ValueError:
            raise ParseError(f"Unknown task {task!r}", line=number)
        if record.key in seen:
            raise DuplicateLabel(f"Duplicate label for {record.key} at line {number}")
        seen.add(record.key)
        records.append(record)
    return records


def write_labels(records: Iterable[LabelRecord]) -> str:
    out = io.StringIO()
    out.write("\t".join(LABEL_HEADER) + "\n")
    for r in records:
        out.write(f"{r.run_id}\t{r.scan_id}\t{r.task.value}\t{r.label}\n")
    return out.getvalue()


def join_labels(
    spectra: Iterable[Spectrum], records: Iterable[LabelRecord], task: Union[Task, str]
) -> List[Tuple[Spectrum, int]]:
    """Pair spectra with their label for one task; unlabelled spectra are dropped"""
    task = Task(task)
    lookup = {(r.run_id, r.scan_id): r.label for r in records if r.task == task}
    joined = []
    dropped = 0
    for s in spectra:
        label = lookup.get(s.key)
        if label is None:
            dropped += 1
            continue
        joined.append((s, label))
    if dropped:
        logger.warning(f"Dropped {dropped} spectra without a {task.value} label")
    return joined


# Embedding matrix


def write_embeddings(matrix: EmbeddingMatrix) -> Tuple[bytes, str]:
    """Serialize to the SEMB binary layout plus its TSV row-index sidecar"""
    header = _EMBEDDING_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, matrix.n_rows, matrix.dim)
    body = matrix.data.astype("<f4", copy=False).tobytes(order="C")
    sidecar = io.StringIO()
    sidecar.write("run_id\tscan_id\n")
    for run_id, scan_id in matrix.rows:
        sidecar.write(f"{run_id}\t{scan_id}\n")
    return header + body, sidecar.getvalue()


def read_embeddings(data: ByteSource, sidecar: Optional[str] = None) -> EmbeddingMatrix:
    """Inverse of write_embeddings; a missing sidecar yields positional row ids"""
    raw = _read_bytes(data)
    if len(raw) < _EMBEDDING_HEADER.size:
        raise FormatError(f"File of {len(raw)} bytes is shorter than the SEMB header")
    magic, version, n_rows, dim = _EMBEDDING_HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"Unsupported SEMB version {version}")
    expected = _EMBEDDING_HEADER.size + 4 * n_rows * dim
    if len(raw) != expected:
        raise FormatError(f"Header declares {n_rows}x{dim} floats ({expected} bytes), file has {len(raw)} bytes")
    values = np.frombuffer(raw, dtype="<f4", offset=_EMBEDDING_HEADER.size).reshape(n_rows, dim)
    if sidecar is None:
        rows = [("", str(i)) for i in range(n_rows)]
    else:
        lines = [line for line in sidecar.splitlines() if line]
        if not lines or lines[0].split("\t") != ["run_id", "scan_id"]:
            raise FormatError("Embedding sidecar needs a 'run_id\\tscan_id' header")
        rows = []
        for line in lines[1:]:
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"Bad sidecar row {line!r}")
            rows.append((parts[0], parts[1]))
        if len(rows) != n_rows:
            raise FormatError(f"Sidecar lists {len(rows)} rows, matrix has {n_rows}")
    return EmbeddingMatrix(values.astype(np.float32), rows)


def save_embeddings(matrix: EmbeddingMatrix, path: Union[str, Path]) -> None:
    path = Path(path)
    binary, sidecar = write_embeddings(matrix)
    path.write_bytes(binary)
    Path(f"{path}.tsv").write_text(sidecar, encoding="utf-8")


def load_embeddings(path: Union[str, Path]) -> EmbeddingMatrix:
    path = Path(path)
    sidecar_path = Path(f"{path}.tsv")
    sidecar = read_text(sidecar_path) if sidecar_path.exists() else None
    return read_embeddings(path.read_bytes(), sidecar)


# Score TSV

SCORE_HEADER = ["run_id", "scan_id", "score"]


def write_scores(rows: Sequence[Tuple[str, str]], scores: Sequence[float]) -> str:
    if len(rows) != len(scores):
        raise FormatError(f"{len(rows)} row ids but {len(scores)} scores")
    out = io.StringIO()
    out.write("\t".join(SCORE_HEADER) + "\n")
    for (run_id, scan_id), score in zip(rows, scores):
        out.write(f"{run_id}\t{scan_id}\t{float(score)!r}\n")
    return out.getvalue()


def read_scores(text: str) -> Dict[Tuple[str, str], float]:
    """Parse a score TSV into a (run_id, scan_id) -> score mapping"""
    lines = text.splitlines()
    if not lines or lines[0].split("\t") != SCORE_HEADER:
        raise ParseError(f"Expected header {SCORE_HEADER}", line=1)
    scores: Dict[Tuple[str, str], float] = {}
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"Expected 3 columns, got {len(parts)}", line=number)
        try:
            scores[(parts[0], parts[1])] = float(parts[2])
        except ValueError:
            raise ParseError(f"Non-numeric score {parts[2]!r}", line=number)
    return scores
