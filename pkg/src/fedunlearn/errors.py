"""Exception types shared across the package."""


class FedUnlearnError(Exception):
    """Base class for all package-specific failures."""


class DimensionMismatchError(FedUnlearnError, ValueError):
    """Array shapes do not line up with the model or federation contract."""


class EmptyFederationError(FedUnlearnError, ValueError):
    """An operation would leave (or was given) a federation with no clients."""


class SingularRemovalError(FedUnlearnError, ValueError):
    """Removing a client with aggregation weight 1 is undefined."""


class StepSizeError(FedUnlearnError, ValueError):
    """Step size violates the bound required by the active curvature regime."""


class InvalidRequestError(FedUnlearnError, ValueError):
    """Unlearning request targets clients that cannot be removed."""


class ConfigError(FedUnlearnError, ValueError):
    """Experiment configuration file is malformed."""


class MissingArtifactsError(FedUnlearnError, FileNotFoundError):
    """A command needs run artifacts that are not on disk."""


class DivergedTrainingError(FedUnlearnError, RuntimeError):
    """Training produced a non-finite or absurdly large parameter vector."""

    def __init__(self, message: str, round_index: int | None = None):
        super().__init__(message)
        self.round_index = round_index
