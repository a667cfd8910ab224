"""Exception hierarchy for stuffnet.

Each error also subclasses the closest builtin so callers can catch either the
specific class or the builtin (``ValueError``, ``RuntimeError``).
"""


class StuffNetError(Exception):
    """Base class for all stuffnet errors."""


class ConfigError(StuffNetError, ValueError):
    """Configuration file or override could not be parsed or validated."""


class GraphError(StuffNetError, RuntimeError):
    """Misuse of a compute graph (non-scalar loss, graph already consumed)."""


class ShapeError(StuffNetError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class InvalidProposalError(StuffNetError, ValueError):
    """A region has zero area after clipping to the feature map."""


class DegenerateBatchError(StuffNetError, RuntimeError):
    """Neither foreground nor background candidates exist for a head minibatch."""


class CheckpointError(StuffNetError, ValueError):
    """Checkpoint file is malformed or does not match the expected model spec."""


class DatasetFormatError(StuffNetError, ValueError):
    """A dataset file is malformed. Message carries the path and line/byte offset."""


class CapabilityError(StuffNetError, RuntimeError):
    """The model or dataset lacks a capability the operation requires."""


class MissingLabelsError(CapabilityError):
    """Segmentation labels required by the chosen variant are missing."""
