"""Exception hierarchy. CLI exit codes are keyed off the top-level categories."""


class MatefError(Exception):
    exit_code = 1


class ConfigError(MatefError):
    exit_code = 2


class StoreError(MatefError):
    exit_code = 3


class StoreLockedError(StoreError):
    pass


class StoreIntegrityError(StoreError):
    pass


class UnknownTestError(StoreError):
    pass


class DuplicateObservationError(StoreError):
    pass


class BackendError(MatefError):
    exit_code = 4


class UnsupportedBackendError(BackendError):
    pass


class AnalysisError(MatefError):
    exit_code = 5


class DegenerateSampleError(AnalysisError):
    pass


class LibraryError(MatefError):
    pass


class SampleShortfallError(LibraryError):
    def __init__(self, tag: str, wanted: int, available: int):
        super().__init__(
            f"requested {wanted} samples tagged {tag!r} but only {available} available "
            f"(short by {wanted - available})"
        )
        self.tag = tag
        self.wanted = wanted
        self.available = available


class OracleError(MatefError):
    pass


class OracleParseError(OracleError):
    def __init__(self, message: str, line: int | None = None, position: int | None = None):
        where = f" (line {line}, position {position})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.position = position


class UnknownToOracleError(OracleError):
    pass


class AdapterError(MatefError):
    pass


class LogParseError(AdapterError):
    def __init__(self, message: str, offset: int | None = None):
        suffix = f" at offset {offset}" if offset is not None else ""
        super().__init__(message + suffix)
        self.offset = offset


class BindError(MatefError):
    def __init__(self, service: str, endpoint: tuple[str, int], cause: OSError):
        super().__init__(f"cannot bind {service} on {endpoint[0]}:{endpoint[1]}: {cause}")
        self.service = service
        self.endpoint = endpoint
