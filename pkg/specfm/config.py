"""Toolkit configuration using Pydantic models and Pydantic Settings"""

from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .chem import RESIDUE_MASSES
from .errors import ConfigError


class Settings(BaseSettings):
    """Process-level settings with environment variable support"""

    log_level: str = "INFO"
    num_workers: int = 1
    torch_threads: Optional[int] = None

    model_config = SettingsConfigDict(
        env_prefix="SPECFM_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PreprocessConfig(_Section):
    """Peak filtering, binning and oxonium extraction parameters"""

    encoder_mz_min: float = 50.0
    encoder_mz_max: float = 2500.0
    max_peaks: int = Field(150, ge=1)
    bin_lo: float = 140.0
    bin_hi: float = 2000.0
    n_bins: int = Field(100, ge=1)
    oxonium_tolerance_ppm: float = Field(10.0, ge=0)
    oxonium_tolerance_floor: float = Field(0.005, ge=0)
    oxonium_table: Optional[str] = None

    @model_validator(mode="after")
    def _check_ranges(self):
        if not self.encoder_mz_min < self.encoder_mz_max:
            raise ValueError("encoder_mz_min must be below encoder_mz_max")
        if not self.bin_lo < self.bin_hi:
            raise ValueError("bin_lo must be below bin_hi")
        return self

    @property
    def bin_width(self) -> float:
        return (self.bin_hi - self.bin_lo) / self.n_bins


class EncoderConfig(_Section):
    """Transformer spectrum encoder architecture (desk-scale defaults)"""

    d_model: int = Field(64, ge=2)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    ff_dim: Optional[int] = None
    dropout: float = Field(0.0, ge=0, lt=1)
    lambda_min: float = Field(0.001, gt=0)
    lambda_max: float = Field(10000.0, gt=0)

    @model_validator(mode="after")
    def _check_shape(self):
        if self.d_model % 2:
            raise ValueError("d_model must be even")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.lambda_min < self.lambda_max:
            raise ValueError("lambda_min must be below lambda_max")
        return self

    @property
    def feedforward_dim(self) -> int:
        return self.ff_dim or 4 * self.d_model

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        """Full-size encoder: 9 layers, 512 dimensions, 8 heads"""
        return cls(d_model=512, n_layers=9, n_heads=8, ff_dim=1024)


class DecoderConfig(_Section):
    """Autoregressive peptide decoder; d_model always follows the encoder"""

    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    ff_dim: Optional[int] = None
    max_len: int = Field(30, ge=1)
    max_charge: int = Field(10, ge=1)
    vocabulary: Optional[str] = None


class TrainConfig(_Section):
    """Optimizer, schedule and stopping parameters for one training loop"""

    lr: float = Field(1e-3, ge=0)
    weight_decay: float = Field(1e-6, ge=0)
    batch_size: int = Field(32, ge=1)
    label_smoothing: float = Field(0.001, ge=0, lt=0.5)
    warmup_steps: int = Field(0, ge=0)
    cosine_half_period: int = Field(0, ge=0)
    patience_epochs: int = Field(5, ge=1)
    max_epochs: int = Field(100, ge=1)
    max_steps: int = Field(3000, ge=1)
    validate_every: int = Field(4000, ge=1)
    hidden_dim: Optional[int] = None
    layer_sweep: List[int] = Field(default_factory=list)
    seed: int = 0

    @field_validator("layer_sweep", mode="before")
    @classmethod
    def _split_list(cls, value):
        if value is None:
            return []
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v.strip()]
        return value

    @field_validator("layer_sweep")
    @classmethod
    def _positive_layers(cls, value: List[int]) -> List[int]:
        if any(v < 1 for v in value):
            raise ValueError("layer counts must be >= 1")
        return value


class MultitaskConfig(TrainConfig):
    """Multi-task fine-tuning: warmup + cosine schedule, step-based validation"""

    lr: float = Field(1e-5, ge=0)
    warmup_steps: int = Field(1000, ge=0)
    cosine_half_period: int = Field(120_000, ge=0)
    weight_quality: float = Field(1.0, ge=0)
    weight_chimera: float = Field(1.0, ge=0)
    weight_phospho: float = Field(1.0, ge=0)
    weight_denovo: float = Field(1.0, ge=0)
    phospho_downsample: int = Field(1, ge=1)


class GbdtConfig(_Section):
    """Gradient boosted tree defaults mirror the common boosting library defaults"""

    max_depth: int = Field(6, ge=1)
    eta: float = Field(0.3, gt=0, le=1)
    lambda_l2: float = Field(1.0, ge=0)
    min_child_weight: float = Field(1.0, ge=0)
    max_rounds: int = Field(2000, ge=1)
    early_stopping_rounds: int = Field(32, ge=1)


SynthTask = Literal["quality", "chimera", "phospho", "glyco", "denovo"]

DEFAULT_POSITIVE_RATES: Dict[str, float] = {
    "quality": 0.40,
    "chimera": 0.45,
    "phospho": 0.54,
    "glyco": 0.102,
    "denovo": 0.25,
}


class SynthConfig(_Section):
    """Synthetic labeled-spectrum generator parameters"""

    task: SynthTask = "phospho"
    n: int = Field(1000, ge=0)
    seed: int = 0
    peptide_len_min: int = Field(7, ge=1)
    peptide_len_max: int = Field(20, ge=1)
    charges: List[int] = Field(default_factory=lambda: [2, 3])
    noise_peaks_min: int = Field(5, ge=0)
    noise_peaks_max: int = Field(40, ge=0)
    keep_high_min: float = Field(0.7, ge=0, le=1)
    keep_high_max: float = Field(1.0, ge=0, le=1)
    keep_low_min: float = Field(0.0, ge=0, le=1)
    keep_low_max: float = Field(0.3, ge=0, le=1)
    chimera_alpha_min: float = Field(0.3, gt=0, le=1)
    chimera_alpha_max: float = Field(1.0, gt=0, le=1)
    positive_rate: Optional[float] = Field(None, gt=0, lt=1)
    neutral_loss_prob: float = Field(0.5, ge=0, le=1)
    phosphate_ion_prob: float = Field(0.9, ge=0, le=1)
    core2_rate: float = Field(0.0, ge=0, le=1)
    noise_mz_lo: float = 140.0
    noise_mz_hi: float = 2000.0
    residues: str = "ACDEFGHKLMNPQRSTVWY"

    @field_validator("charges", mode="before")
    @classmethod
    def _split_charges(cls, value):
        if isinstance(value, str):
            return [int(v) for v in value.split(",") if v.strip()]
        return value

    @model_validator(mode="after")
    def _check_ranges(self):
        pairs = [
            ("peptide_len", self.peptide_len_min, self.peptide_len_max),
            ("noise_peaks", self.noise_peaks_min, self.noise_peaks_max),
            ("keep_high", self.keep_high_min, self.keep_high_max),
            ("keep_low", self.keep_low_min, self.keep_low_max),
            ("chimera_alpha", self.chimera_alpha_min, self.chimera_alpha_max),
            ("noise_mz", self.noise_mz_lo, self.noise_mz_hi),
        ]
        for name, lo, hi in pairs:
            if lo > hi:
                raise ValueError(f"{name} range is empty ({lo} > {hi})")
        if not self.charges or any(z < 1 for z in self.charges):
            raise ValueError("charges must be a non-empty list of positive integers")
        if not self.residues or any(aa not in RESIDUE_MASSES for aa in self.residues):
            raise ValueError(f"residues must be standard amino-acid letters, got {self.residues!r}")
        if not self.keep_low_max < 0.5 <= self.keep_high_min:
            raise ValueError("keep_low range must lie below 0.5 and keep_high range at or above it")
        return self

    @property
    def rate(self) -> float:
        return self.positive_rate if self.positive_rate is not None else DEFAULT_POSITIVE_RATES[self.task]


class RunConfig(_Section):
    """Every configuration section a CLI run can touch"""

    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    head: TrainConfig = Field(default_factory=lambda: TrainConfig(lr=1e-3))
    e2e: TrainConfig = Field(default_factory=lambda: TrainConfig(lr=1e-4))
    pretrain: TrainConfig = Field(
        default_factory=lambda: TrainConfig(lr=5e-4, label_smoothing=0.0, warmup_steps=100, cosine_half_period=20_000)
    )
    multitask: MultitaskConfig = Field(default_factory=MultitaskConfig)
    gbdt: GbdtConfig = Field(default_factory=GbdtConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)


def parse_key_values(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    """Parse `section.key = value` lines, skipping blanks and `#` comments"""
    values: Dict[str, str] = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{number}: key {key!r} needs a section prefix")
        values[key] = value
    return values


def build_run_config(values: Dict[str, str]) -> RunConfig:
    """Validate flat dotted key/value pairs into a RunConfig"""
    sections: Dict[str, Dict[str, str]] = {}
    for key, value in values.items():
        section, name = key.split(".", 1)
        if section not in RunConfig.model_fields:
            raise ConfigError(f"Unknown config section: {section!r} (key {key!r})")
        sections.setdefault(section, {})[name] = value if value != "" else None
    try:
        defaults = RunConfig()
        merged = {}
        for section in RunConfig.model_fields:
            base = getattr(defaults, section).model_dump()
            base.update(sections.get(section, {}))
            merged[section] = base
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_run_config(path: Optional[Path] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    """Resolve defaults < config file < `key=value` flag overrides

    Args:
        path: Optional key = value config file
        overrides: `section.key=value` strings from the command line

    Returns:
        Validated RunConfig
    """
    values: Dict[str, str] = {}
    if path is not None:
        data = Path(path).read_bytes()
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"{path} is not valid UTF-8 at byte offset {e.start}")
        values.update(parse_key_values(text.splitlines(), source=str(path)))
    if overrides:
        values.update(parse_key_values(overrides, source="--set"))
    return build_run_config(values)


def dump_run_config(cfg: RunConfig) -> str:
    """Render a RunConfig as sorted `section.key = value` lines"""
    lines = []
    for section in sorted(RunConfig.model_fields):
        for key, value in sorted(getattr(cfg, section).model_dump().items()):
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section}.{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


# Global settings instance
settings = Settings()
