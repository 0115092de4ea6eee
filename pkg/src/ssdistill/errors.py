"""Exception taxonomy shared across the package.

Every failure raised on purpose derives from SsdistillError so callers (and
the CLI) can map error classes to exit codes without string matching.
"""

from __future__ import annotations


class SsdistillError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(SsdistillError):
    """Invalid or inconsistent configuration values."""


class ContractError(SsdistillError):
    """A caller violated a documented precondition (shape, mode, state)."""


class DimensionError(ContractError):
    """Shape mismatch between tensors; message names both shapes."""


class FormatError(SsdistillError):
    """Malformed on-disk artifact (bundle manifest, checkpoint, config file)."""


class NumericError(SsdistillError):
    """A numeric invariant broke: non-finite values, failed residual check."""


class SingularSystemError(NumericError):
    """A linear system stayed non-factorizable after jitter escalation."""


class TrainingError(SsdistillError):
    """A training loop diverged or hit a non-finite loss; message says where."""
