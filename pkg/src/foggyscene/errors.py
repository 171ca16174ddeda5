"""Error taxonomy shared by the whole package.

Each class maps onto one CLI exit code (see cli.EXIT_CODES): configuration
problems are reported before any work starts, dataset problems when data is
missing or malformed, pipeline problems when stage prerequisites are absent,
and format problems when a checkpoint cannot be read.
"""


class FoggySceneError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FoggySceneError, ValueError):
    """Invalid configuration value (bad resolution, channel count, range...)."""


class ContractError(FoggySceneError, ValueError):
    """An operation was called with arguments violating its contract."""


class DatasetError(FoggySceneError, RuntimeError):
    """Dataset missing, empty, or structurally unusable."""


class PipelineError(FoggySceneError, RuntimeError):
    """A stage prerequisite (earlier checkpoint, trained component) is absent."""


class FormatError(FoggySceneError, RuntimeError):
    """A serialized artifact (checkpoint) is corrupt or version-mismatched."""


class MetricsError(FoggySceneError, ValueError):
    """Metric computation over an empty or degenerate accumulation."""
