#!/usr/bin/env python3
from typing import Optional


class HypeError(Exception):
    """Base error. `kind` is the short token printed by the CLI."""

    kind = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(str(self.message).split())
        return f"error: {self.kind}: {text}"


class ConfigError(HypeError):
    kind = "config"


class ValidationError(HypeError):
    kind = "validation"


class ArgumentError(HypeError):
    kind = "argument"


class ShapeError(HypeError):
    kind = "shape"


class ContractError(HypeError):
    kind = "contract"


class DomainError(HypeError):
    kind = "domain"


class WavFormatError(HypeError):
    kind = "wav-format"


class UnsupportedLayoutError(HypeError):
    kind = "unsupported-layout"


class DegenerateBatchError(HypeError):
    kind = "degenerate-batch"


class StratificationError(HypeError):
    kind = "stratification"


class UndefinedMetricError(HypeError):
    kind = "undefined-metric"


class ReportError(HypeError):
    kind = "report"


class BundleError(HypeError):
    kind = "bundle"


class TrainingError(HypeError):
    kind = "training"

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
