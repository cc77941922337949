# errors.py
"""
Exception hierarchy shared by every module.

Library code raises these; main.py turns them into a one-line JSON error
and a non-zero exit code.
"""

from typing import Any, Dict, Optional


class LabError(Exception):
    """Base class for all expected failures."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def details(self) -> Dict[str, Any]:
        return {}


class ShapeError(LabError):
    pass


class ScanError(LabError):
    pass


class NumericsError(LabError):
    pass


class DynamicsError(LabError):
    pass


class LoraError(LabError):
    pass


class DataError(LabError):
    pass


class RunLockError(LabError):
    pass


class CheckpointError(LabError):
    """Container read/write failure; `field` names the failing header field or tensor."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.reason = message

    def details(self) -> Dict[str, Any]:
        return {"field": self.field}


class TrainingError(LabError):
    def __init__(self, step: Optional[int], message: str):
        prefix = f"step {step}: " if step is not None else ""
        super().__init__(prefix + message)
        self.step = step

    def details(self) -> Dict[str, Any]:
        return {"step": self.step}


class ConfigError(LabError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key

    def details(self) -> Dict[str, Any]:
        return {"key": self.key}
