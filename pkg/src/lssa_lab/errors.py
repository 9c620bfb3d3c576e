"""
Error hierarchy for lssa-lab.

Every failure the harness can report carries a machine-readable `code` and the
process `exit_code` the CLI should return. `to_record()` is what gets printed
on stderr when a command fails.
"""

from typing import Any, Dict

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERICAL = 4


class LabError(Exception):
    code = "internal"
    exit_code = EXIT_INTERNAL

    def __init__(self, detail: str, code: str | None = None):
        super().__init__(detail)
        self.detail = detail
        if code:
            self.code = code

    def to_record(self) -> Dict[str, Any]:
        return {"error": self.code, "detail": self.detail, "exit_code": self.exit_code}


# ---------------------------
# Config (exit 2)
# ---------------------------
class ConfigError(LabError, ValueError):
    code = "invalid_config"
    exit_code = EXIT_CONFIG


class UnknownPipelineError(ConfigError):
    code = "unknown_pipeline"


# ---------------------------
# Artifacts / data integrity (exit 3)
# ---------------------------
class MissingArtifactError(LabError, FileNotFoundError):
    code = "missing_artifact"
    exit_code = EXIT_MISSING_ARTIFACT

    def __init__(self, path, detail: str | None = None, code: str | None = None):
        self.path = str(path)
        super().__init__(detail or f"missing artifact: {self.path}", code)


class ManifestMissingError(MissingArtifactError):
    code = "missing_manifest"


class ArtifactCycleError(LabError):
    code = "artifact_cycle"
    exit_code = EXIT_CONFIG


class DataIntegrityError(LabError):
    exit_code = EXIT_MISSING_ARTIFACT


class ChecksumMismatchError(DataIntegrityError):
    code = "checksum_mismatch"

    def __init__(self, filename: str, expected: str, actual: str):
        self.filename = filename
        super().__init__(f"checksum mismatch for {filename}: expected {expected}, got {actual}")


class SchemaVersionError(DataIntegrityError):
    code = "version_mismatch"

    def __init__(self, what: str, found, supported):
        self.found = found
        self.supported = supported
        super().__init__(f"{what} version {found} is not supported (reader supports {supported})")


class VocabularyMismatchError(DataIntegrityError):
    code = "vocab_mismatch"

    def __init__(self, expected: str, actual: str):
        self.expected = expected
        self.actual = actual
        super().__init__(f"vocabulary hash mismatch: model has {expected}, dataset has {actual}")


# ---------------------------
# Numerical (exit 4)
# ---------------------------
class NumericalError(LabError, ArithmeticError):
    code = "nan_loss"
    exit_code = EXIT_NUMERICAL


class SingularEmbeddingError(NumericalError):
    code = "singular_embedding"


class DivergenceError(NumericalError):
    code = "divergence"


# ---------------------------
# Input contracts
# ---------------------------
class ShapeMismatchError(LabError, ValueError):
    code = "shape_mismatch"
    exit_code = EXIT_CONFIG


class InvalidPermutationError(LabError, ValueError):
    code = "invalid_permutation"
    exit_code = EXIT_CONFIG


class EmptyInputError(LabError, ValueError):
    code = "empty_input"
    exit_code = EXIT_CONFIG
