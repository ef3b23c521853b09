"""Exception hierarchy shared by the whole package.

Every error carries enough context (shapes, names, indices) to be actionable
from a CLI one-liner. The CLI maps these classes onto exit codes.
"""


class FusionAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(FusionAlignError):
    """Tensor/matrix dimensions do not satisfy an operation's contract."""


class ContractError(FusionAlignError):
    """A precondition unrelated to shapes was violated (ranges, stages, ...)."""


class DegenerateInputError(FusionAlignError):
    """Numerically degenerate input, e.g. a zero-norm row fed to a normalizer."""


class NumericError(FusionAlignError):
    """NaN/Inf appeared where finite values are guaranteed."""


class PoisonedGradientError(NumericError):
    """A gradient contained NaN/Inf; the optimizer step was aborted."""


class DataFormatError(FusionAlignError):
    """Base for on-disk format problems."""


class CorruptBankError(DataFormatError):
    """Embedding-bank payload disagrees with its manifest."""


class BankVersionError(DataFormatError):
    """Unsupported bank_version in a manifest."""


class CorruptCheckpointError(DataFormatError):
    """Checkpoint file truncated or inconsistent with its header."""


class CheckpointVersionError(DataFormatError):
    """Unsupported checkpoint version."""


class MissingChannelError(DataFormatError):
    """A requested channel name is absent from a recording."""


class EmptyGroupError(DataFormatError):
    """A (subject, stimulus) repetition group was empty."""


class MaskError(ContractError):
    """Branch mask leaves no active branch or does not match the branch count."""


class ProtocolError(ContractError):
    """Ablation/evaluation cells were run on inconsistent test partitions."""
