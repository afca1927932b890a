"""Exception types shared across the pipeline.

The three direct subclasses of :class:`CamforgeError` partition failures by
CLI exit code: usage/config problems (2), malformed or inconsistent data (3),
and numerically meaningless inputs (4).
"""


class CamforgeError(Exception):
    pass


class UsageError(CamforgeError):
    """Bad invocation: unknown config keys, out-of-range settings, missing artifacts."""


class DataError(CamforgeError):
    """Malformed or inconsistent input data: files, shapes, labels."""


class NumericError(CamforgeError):
    """Input that makes the requested computation meaningless."""


class _FileContextMixin:
    """Attaches a file path and byte offset to a format error."""

    def __init__(self, message, path, offset=None):
        self.path = str(path)
        self.offset = offset
        where = self.path if offset is None else f"{self.path} at byte {offset}"
        super().__init__(f"{message} [{where}]")


class TensorIoError(_FileContextMixin, DataError):
    pass


class BadMagic(TensorIoError):
    pass


class UnsupportedDtype(TensorIoError):
    pass


class BadRank(TensorIoError):
    pass


class TruncatedPayload(TensorIoError):
    pass


class NonFiniteValue(_FileContextMixin, NumericError):
    pass


class IoFailure(DataError):
    pass


class SchemaError(DataError):
    """Manifest document does not match the expected schema; message names the field."""


class DuplicateClassName(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class MissingGroundTruth(DataError):
    pass


class ChannelOutOfRange(DataError):
    pass


class EmptyRegion(DataError):
    """The mask selects no pixels, so the sample contributes no prototype."""


class TooFewPoints(DataError):
    pass


class DegenerateInput(NumericError):
    pass


class ZeroNormVector(NumericError):
    pass


class NoValidClass(NumericError):
    pass
