"""Shared exception types with stable meanings across modules."""


class CongludeError(Exception):
    """Base class for all library errors."""


class ShapeError(CongludeError):
    """Operand shapes are inconsistent with the operation's contract."""


class NumericError(CongludeError):
    """A computation produced non-finite values or an undefined quantity."""


class ContractError(CongludeError):
    """An operation was called outside its documented precondition."""


class DataFormatError(CongludeError):
    """A file or stream does not match the expected on-disk format."""
