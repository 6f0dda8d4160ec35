"""Exception hierarchy; `exit_code` is what the CLI returns for each category."""


class PatchZeroError(Exception):
    exit_code = 1


# usage / configuration
class ConfigError(PatchZeroError):
    exit_code = 2


class ConfigSyntaxError(ConfigError):
    def __init__(self, message: str, line: int, col: int) -> None:
        super().__init__(f"{message} (line {line}, col {col})")
        self.line = line
        self.col = col


class ConfigSchemaError(ConfigError):
    def __init__(self, key_path: str, message: str) -> None:
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class MissingArtifactError(ConfigError):
    pass


class ArtifactExistsError(ConfigError):
    pass


# file formats
class DataFormatError(PatchZeroError):
    exit_code = 3


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class CheckpointError(DataFormatError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


# numerics
class NumericError(PatchZeroError):
    exit_code = 4


class TensorError(NumericError):
    pass


class ShapeError(TensorError):
    pass


class DomainError(TensorError):
    pass


class TapeError(TensorError):
    pass


class TrainingDivergedError(NumericError):
    pass


class PatchSpecError(NumericError):
    pass


class AttackConfigError(NumericError):
    pass
