"""Exception hierarchy.

Every error carries an integer ``code`` that the command line maps onto its
exit status (2 config, 3 data, 4 numerical abort).
"""


class EgoSAGError(Exception):
    code = 1


class ParameterError(EgoSAGError, ValueError):
    """An argument is outside its admissible range."""

    code = 2


class DomainError(EgoSAGError, ValueError):
    """Input data violates a precondition (empty scene, non-finite values, ...)."""

    code = 3


class ConfigError(EgoSAGError, KeyError):
    code = 2

    def __init__(self, message, key_path=None):
        super().__init__(message)
        self.key_path = key_path

    def __str__(self):
        msg = self.args[0]
        return f"{msg} (key: {self.key_path})" if self.key_path else msg


class DataError(EgoSAGError):
    code = 3


class MissingFileError(DataError, FileNotFoundError):
    def __init__(self, path, what="file"):
        super().__init__(f"missing {what}: {path}")
        self.path = str(path)


class VersionMismatchError(DataError):
    """Bad magic bytes or an unsupported container version."""


class ConfigHashMismatchError(DataError):
    pass


class NumericalAbort(EgoSAGError, FloatingPointError):
    code = 4

    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
