"""Pydantic schemas for label, metrics, training-log and provenance records"""

import enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field


class Task(str, enum.Enum):
    """Downstream classification tasks"""
    QUALITY = "quality"
    CHIMERA = "chimera"
    PHOSPHO = "phospho"
    GLYCO = "glyco"


class LabelRecord(BaseModel):
    """One row of the label TSV"""
    run_id: str
    scan_id: str
    task: Task
    label: int = Field(..., ge=0, le=1)

    model_config = ConfigDict(frozen=True)

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.run_id, self.scan_id, self.task.value)


class MetricsReport(BaseModel):
    """Metrics JSON written by `eval`"""
    task: str
    n: int
    n_pos: int
    auroc: float
    aupr: float
    f1: float
    threshold: float = 0.5


class ValidationEvent(BaseModel):
    """One line of the training log"""
    step: int
    task: str
    split: str
    loss: float
    auroc: Optional[float] = None

    def to_tsv(self) -> str:
        auroc = "" if self.auroc is None else f"{self.auroc:.6f}"
        return f"{self.step}\t{self.task}\t{self.split}\t{self.loss:.6f}\t{auroc}"


class PlantedIon(BaseModel):
    name: str
    mz: float
    intensity: float


class SynthProvenance(BaseModel):
    """JSON-lines sidecar entry that lets a synthetic label be re-derived"""
    index: int
    task: str
    label: int
    peptides: List[str]
    charge: int
    phospho_site: Optional[int] = None
    keep_fraction: float = 1.0
    noise_count: int = 0
    chimera_alpha: Optional[float] = None
    planted: List[PlantedIon] = Field(default_factory=list)
