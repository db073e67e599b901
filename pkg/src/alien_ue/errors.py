"""Exception types shared across the toolkit."""


class UncertaintyToolkitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(UncertaintyToolkitError):
    """Invalid input: bad shapes, non-finite values, malformed files."""


class DegenerateDataError(UncertaintyToolkitError):
    """Data cannot support the operation (single-class labels, constant
    vectors, too few ensemble members, ...)."""


class MissingArtifactError(UncertaintyToolkitError):
    """A required fitted artifact or table cell is absent."""
