"""Exception hierarchy.

``InputError`` covers bad user input (files, schemas, configurations,
violated preconditions) and maps to CLI exit code 2.  ``NumericError``
covers estimation-time failures (degenerate splits, non-convergence,
boundary propensities) and maps to exit code 3.
"""


class TiCdeError(Exception):
    """Base class for all library errors."""


class InputError(TiCdeError):
    """Invalid input: schemas, files, configurations, preconditions."""


class NumericError(TiCdeError):
    """Numeric failure during fitting or estimation."""


# dataset / fold planning
class EmptyDataset(InputError):
    pass


class SingleArm(InputError):
    pass


class NonFinite(InputError):
    pass


class RaggedCovariates(InputError):
    pass


class ArmTooSmall(InputError):
    pass


# file ingestion
class SchemaError(InputError):
    pass


class MissingId(InputError):
    pass


class DuplicateId(InputError):
    pass


class LengthMismatch(InputError):
    pass


# configuration
class ConfigInvalid(InputError):
    pass


class KTooLarge(InputError):
    pass


class TooFewReplications(InputError):
    pass


# fitting / estimation
class DegenerateFold(NumericError):
    pass


class FitFailure(NumericError):
    pass


class SingularFit(NumericError):
    pass


class PropensityAtBoundary(NumericError):
    pass
