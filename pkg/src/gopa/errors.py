"""Exception hierarchy shared by all gopa modules."""


class GopaError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(GopaError, ValueError):
    """An argument is outside the range an operation accepts."""


class DomainError(GopaError, ValueError):
    """An operation was applied to an object it is not defined for.

    Examples are asking for the privacy of a malicious user or combining
    ciphertexts produced under different keys.
    """


class ProtocolError(GopaError):
    """The protocol was driven into a state it does not allow."""


class CryptoError(GopaError):
    """Key generation or decryption failed."""


class EncodingRangeError(GopaError, OverflowError):
    """A fixed-point value does not fit the signed half-range of Z_N."""


class NumericalError(GopaError, ArithmeticError):
    """A numerical routine failed or a quantity is undefined."""
