"""Exception types shared across the harness."""


class MriBenchError(Exception):
    """Base class for all harness errors."""


class ConfigurationError(MriBenchError):
    """Bad user input: unknown keys, missing directories, invalid values."""


class ManifestError(MriBenchError):
    """Malformed manifest file or schema violation."""


class RegistryError(MriBenchError):
    """Unknown backbone id or inconsistent registry entry."""


class WeightFetchError(MriBenchError):
    """Pretrained weights could not be obtained.

    `reason` is either "network" (download/IO failure) or "checksum"
    (file retrieved but its hash does not match the published one).
    """

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


class CheckpointIncompatibleError(MriBenchError):
    """Checkpoint does not match the requested model specs."""


class NumericalError(MriBenchError):
    """Non-finite loss or gradient encountered during training."""


class VerificationError(MriBenchError):
    """Dataset counts did not match expectations under strict mode."""
