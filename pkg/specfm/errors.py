"""Exception types raised across the toolkit"""

from typing import Optional


class SpecfmError(ValueError):
    """Base class for every error the toolkit raises on bad data or config"""

    kind = "error"


class ConfigError(SpecfmError):
    """Invalid or unknown configuration value"""

    kind = "config"


class InvalidPeptide(SpecfmError):
    kind = "invalid peptide"


class InvalidCharge(SpecfmError):
    kind = "invalid charge"


class ParseError(SpecfmError):
    """Malformed spectrum or label input

    Args:
        message: Human readable description
        line: 1-based line number in the source, when known
        spectrum_id: Offending spectrum id, when known
    """

    kind = "parse error"

    def __init__(self, message: str, line: Optional[int] = None, spectrum_id: Optional[str] = None):
        self.line = line
        self.spectrum_id = spectrum_id
        where = []
        if line is not None:
            where.append(f"line {line}")
        if spectrum_id is not None:
            where.append(f"spectrum {spectrum_id}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DuplicateLabel(SpecfmError):
    kind = "duplicate label"


class FormatError(SpecfmError):
    """Binary embedding, checkpoint or model file does not match its declared layout"""

    kind = "format error"


class EmptySpectrum(SpecfmError):
    kind = "empty spectrum"


class NumericError(SpecfmError):
    """Non-finite values reached a numerical routine"""

    kind = "numeric error"


class VocabError(SpecfmError):
    kind = "vocabulary error"


class DegenerateValidation(SpecfmError):
    kind = "degenerate validation"


class DegenerateLabels(SpecfmError):
    """Only one class present where a ranking metric or fit needs both"""

    kind = "degenerate labels"

    def __init__(self, message: str = ""):
        text = "degenerate labels"
        super().__init__(f"{text}: {message}" if message else text)


class DegenerateInput(SpecfmError):
    kind = "degenerate input"
