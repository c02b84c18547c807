"""Exception types shared across the toolkit."""


class DerainError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(DerainError):
    """A rain-synthesis parameter is outside its allowed range."""


class ShapeMismatchError(DerainError):
    """Two images or batches that must share a shape do not."""


class EmptyBackgroundsError(DerainError):
    """Dataset synthesis was given no background images."""


class ManifestError(DerainError):
    """Base class for dataset-manifest problems."""


class MissingFileError(ManifestError):
    """A file referenced by a manifest does not exist."""


class UndecodableImageError(ManifestError):
    """A referenced file exists but cannot be decoded as an image."""


class DuplicateIdError(ManifestError):
    """Two manifest entries share an id."""


class EmptyManifestError(ManifestError):
    """An operation that needs data received a manifest with no entries."""


class ImageSmallerThanPatchError(DerainError):
    """An image is smaller than the requested crop size."""


class NonDivisibleInputError(DerainError):
    """Network input dimensions are not divisible by 32."""


class WrongInputSizeError(DerainError):
    """Discriminator input is not the fixed 224x224 size."""


class ShapeInconsistencyError(DerainError):
    """Feature maps passed between network stages have inconsistent shapes."""


class StageInvariantError(DerainError):
    """Loss weights violate the constraints of the training stage."""


class DomainError(DerainError):
    """Probability inputs to an adversarial loss are outside [0, 1] or non-finite."""


class NonFiniteLossError(DerainError):
    """Training produced a NaN or infinite loss."""


class CheckpointError(DerainError):
    """A checkpoint file is unreadable or does not match the expected config."""


class IdMismatchError(DerainError):
    """Result and ground-truth manifests do not contain the same ids."""


class ConfigError(DerainError):
    """A config file or command line contains unknown or invalid keys."""
