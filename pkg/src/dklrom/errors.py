"""Shared exception taxonomy.

ValidationError: inputs violate a documented precondition (bad shapes, ranges).
ConfigurationError: a config object is internally inconsistent or unusable.
NumericalError: linear algebra failed beyond the recovery policy.
IntegrationError: a simulator produced non-finite state.
FormatError: on-disk data does not match the documented layout.
CheckpointError: checkpoint manifest/tensor mismatch.
"""


class ValidationError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class IntegrationError(RuntimeError):
    pass


class FormatError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass
