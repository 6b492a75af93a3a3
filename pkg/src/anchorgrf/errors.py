"""Exception hierarchy.

Every failure mode that callers are expected to catch has its own class so
that the engine can distinguish "this sample is bad, drop it" from "this run
is unrecoverable".
"""


class AnchorGrfError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(AnchorGrfError):
    """A scalar or vector parameter is outside its admissible set."""


class CapacityError(AnchorGrfError):
    """Requested problem size exceeds the configured dense-storage cap."""


class NumericalError(AnchorGrfError):
    """A matrix factorization failed after the full jitter ladder."""


class InvalidConstraintError(AnchorGrfError):
    """A linear constraint matrix is rank deficient or inconsistent."""


class InvalidAnchorsetError(AnchorGrfError):
    """An anchorset does not induce a usable (invertible) prior."""


class DegenerateSampleError(AnchorGrfError):
    """A weighted sample carries too little information to fit a density."""


class ConditioningFailureError(AnchorGrfError):
    """The observation lies outside the support of every mixture component."""


class DegenerateWeightsError(AnchorGrfError):
    """All importance weights underflowed."""


class ForwardModelError(AnchorGrfError):
    """A forward simulation produced non-finite output for one sample."""


class ConfigError(AnchorGrfError):
    """Experiment configuration is missing or inconsistent."""


class ArchiveIntegrityError(AnchorGrfError):
    """A run archive is incomplete or fails reload validation."""
