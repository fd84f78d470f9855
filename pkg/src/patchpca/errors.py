"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: ParameterError -> 1 (usage/validation),
NumericError and InternalError -> 2 (runtime/numeric), DataFormatError and
plain OSError -> 3 (I/O).
"""


class PatchPcaError(Exception):
    """Base class for all library errors."""


class ParameterError(PatchPcaError):
    """Invalid argument, shape, geometry, or configuration value."""


class NumericError(PatchPcaError):
    """A numerical procedure failed (divergence, NaN, non-convergence)."""


class SolverError(NumericError):
    """Linear solve did not reach the requested residual.

    Carries the final relative residual and, when raised from dataset
    generation, the index of the offending sample.
    """

    def __init__(self, message, residual=None, sample_index=None):
        super().__init__(message)
        self.residual = residual
        self.sample_index = sample_index


class TrainingError(NumericError):
    """Training produced a non-finite loss; carries the epoch index."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class InternalError(PatchPcaError):
    """A condition the library's own invariants should have made impossible."""


class DataFormatError(PatchPcaError):
    """Base class for persisted-file problems."""


class MagicError(DataFormatError):
    """File does not start with the expected magic bytes."""

    def __init__(self, expected, actual):
        super().__init__(
            f"bad magic: expected {expected!r}, found {actual!r}"
        )
        self.expected = expected
        self.actual = actual


class VersionError(DataFormatError):
    """File declares a format version newer than this library supports."""

    def __init__(self, found, supported):
        super().__init__(
            f"format version {found} is newer than supported version {supported}"
        )
        self.found = found
        self.supported = supported


class TruncationError(DataFormatError):
    """File ended before the declared payload was complete."""


class ChecksumError(DataFormatError):
    """Stored CRC32 does not match the payload; names the bad section."""

    def __init__(self, section, expected, actual):
        super().__init__(
            f"checksum mismatch in section {section!r}: "
            f"stored {expected:#010x}, computed {actual:#010x}"
        )
        self.section = section
        self.expected = expected
        self.actual = actual
