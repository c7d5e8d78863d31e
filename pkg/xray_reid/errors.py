"""Exception hierarchy shared by every module of the toolkit.

Library code raises these; only the command-line layer catches them.
"""


class ReidError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ReidError):
    """Invalid or incomplete configuration."""


class ManifestError(ReidError):
    """A manifest or its schema sidecar could not be parsed."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DimensionMismatchError(ReidError, ValueError):
    """Vector or matrix shapes disagree."""


class EncoderError(ReidError):
    """Encoder forward/backward failure (e.g. zero vector under normalization)."""


class CheckpointError(ReidError):
    """Checkpoint file could not be read."""


class CheckpointVersionError(CheckpointError):
    """Magic bytes or format version not recognised."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter shapes disagree with the stored config."""


class MiningError(ReidError):
    """No valid triplet can be formed from the given labels."""


class PairConstructionError(ReidError):
    """Not enough eligible pairs for the requested counts."""

    def __init__(self, message, shortfall=0):
        super().__init__(message)
        self.shortfall = shortfall


class TrainingError(ReidError):
    """Training aborted."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ProbeError(ReidError):
    """Linear probe training or evaluation failure."""


class UnknownAttributeError(ReidError, KeyError):
    """An attribute name is not part of the dataset schema."""

    def __init__(self, name, available):
        self.name = name
        self.available = sorted(available)
        super().__init__(
            f"unknown attribute '{name}'; available attributes: "
            f"{', '.join(self.available) or '(none)'}"
        )

    def __str__(self):
        return self.args[0]


class SplitError(ReidError):
    """A patient-level split would leave a partition without patients."""


class SingleClassError(ReidError, ValueError):
    """A metric needs both same- and different-identity samples."""


class EvaluationError(ReidError):
    """Evaluation of one pair setting failed."""

    def __init__(self, message, setting=None):
        super().__init__(message)
        self.setting = setting
