# fleet_errors.py
"""
Exception hierarchy shared by every fleetgpt module.

Each domain error also derives from the builtin a caller would naturally
catch (ValueError, KeyError, RuntimeError), so plain `except ValueError`
blocks keep working.
"""

from __future__ import annotations


class FleetGPTError(Exception):
    """Root of all fleetgpt errors."""


# -----------------------------
# Numerics / tensors
# -----------------------------
class DimensionError(FleetGPTError, ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(FleetGPTError, RuntimeError):
    """A pre- or post-condition of an operation was violated."""


# -----------------------------
# Tokenizer / model
# -----------------------------
class InputTooShortError(FleetGPTError, ValueError):
    """Signal shorter than one patch."""


class MissingPoolError(FleetGPTError, KeyError):
    """No prompt/task token pool registered for a fleet or sensor."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(FleetGPTError, ValueError):
    """Invalid or inconsistent configuration."""


# -----------------------------
# Data ingestion
# -----------------------------
class DataParseError(FleetGPTError, ValueError):
    """CSV / manifest content that cannot be turned into a dataset."""


# -----------------------------
# Checkpoints
# -----------------------------
class CheckpointError(FleetGPTError, ValueError):
    """Base for checkpoint read failures."""


class CorruptCheckpointError(CheckpointError):
    """CRC32 mismatch."""


class CheckpointVersionError(CheckpointError):
    """Unknown format version."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncated file, or malformed table."""
