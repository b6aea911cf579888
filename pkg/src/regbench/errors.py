"""Exception types raised across the harness.

Every operation documents which of these it can raise; callers that need
to distinguish failure modes catch the specific class, everything else
catches RegbenchError.
"""


class RegbenchError(Exception):
    """Base class for all harness errors."""


# --- landmark / dataset files ---

class MalformedRow(RegbenchError):
    """A landmark row holds a non-numeric or non-finite coordinate."""


class EmptyFile(RegbenchError):
    """A landmark file contains no data rows."""


class MissingColumns(RegbenchError):
    """A landmark row has fewer than the two coordinate columns."""


class IoFailure(RegbenchError):
    """Reading or writing an artifact file failed."""


class UnsupportedFormat(RegbenchError):
    """Image format not supported for header-only geometry or preprocessing."""


class CorruptHeader(RegbenchError):
    """Image header could not be decoded."""


class NonPositiveFactor(RegbenchError):
    """A scale or time factor must be strictly positive."""


class DuplicateImageInSample(RegbenchError):
    """The same image path appears twice within one sample."""


class MissingRequiredColumn(RegbenchError):
    """A pairing table lacks one of its required columns."""


class NonexistentPath(RegbenchError):
    """A referenced file does not exist (raised only under strict validation)."""


class EmptyInput(RegbenchError):
    """An operation requiring a non-empty landmark set received an empty one."""


class ManifestError(RegbenchError):
    """A dataset manifest is structurally invalid."""


# --- metrics ---

class LengthMismatch(RegbenchError):
    """Two landmark sets that must be row-aligned have different lengths."""


class NonPositiveDiagonal(RegbenchError):
    """Image diagonal used for normalization must be strictly positive."""


class EmptyGroup(RegbenchError):
    """An aggregation group contains no records."""


class ContractViolation(RegbenchError):
    """An operation precondition was violated by the caller."""


# --- adapters ---

class UnknownPlaceholder(RegbenchError):
    """A command template references a placeholder outside the documented set."""


class AdapterSpecError(RegbenchError):
    """An adapter spec file is missing required fields or malformed."""


class MissingOutput(RegbenchError):
    """The method exited cleanly but produced no warped-landmarks file."""


class MalformedOutput(RegbenchError):
    """The warped-landmarks file exists but cannot be parsed."""


# --- runner ---

class RootNotWritable(RegbenchError):
    """The experiment root directory cannot be created or written."""


class ExistsWithoutResume(RegbenchError):
    """Target experiment directory already exists and resume was not requested."""


class EmptyCaseList(RegbenchError):
    """The cases source yielded no registration cases."""


class TableUnreadable(RegbenchError):
    """The results table is corrupt beyond a truncated final line."""


# --- report ---

class MissingScope(RegbenchError):
    """A scope-comparison chart needs records from two scopes."""


class FewerThanThreeAxes(RegbenchError):
    """A radar chart needs at least three axes."""
