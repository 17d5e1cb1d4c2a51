"""Exception hierarchy shared by the services and the CLI.

Each family carries the process exit code the CLI returns for it.
"""


class DpvilError(Exception):
    exit_code = 1


class ConfigError(DpvilError):
    exit_code = 2


class DataError(DpvilError):
    exit_code = 3


class NumericalError(DpvilError):
    exit_code = 4


# Numerical failures

class NotPositiveDefinite(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class NumericalUnderflow(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class DegenerateSplit(NumericalError):
    pass


class UnstableIntegration(NumericalError):
    pass


class ShapeMismatch(NumericalError):
    pass


# Data and file failures

class EmptyDataset(DataError):
    pass


class BandEmpty(DataError):
    pass


class IoError(DataError):
    pass


class VersionMismatch(DataError):
    pass


class ChecksumMismatch(DataError):
    pass
