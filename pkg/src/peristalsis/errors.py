"""Exception hierarchy.

Everything raised on bad input derives from :class:`InputError`; violations of
a modelling precondition (e.g. single-class training data) derive from
:class:`ContractError`.  The CLI maps these to exit codes 2 and 3.
"""


class PeristalsisError(Exception):
    pass


class InputError(PeristalsisError, ValueError):
    pass


class ContractError(PeristalsisError, ValueError):
    pass


class UnsupportedFormat(InputError):
    pass


class CorruptHeader(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvertedInterval(InputError):
    pass


class WindowTooLong(InputError):
    pass


class NegativeFrequency(InputError):
    pass


class SegmentTooShort(InputError):
    pass


class EmptyInput(InputError):
    pass


class NonFiniteInput(InputError):
    pass


class LengthMismatch(InputError):
    pass


class NonPositiveSigma(InputError):
    pass


class EmptyObservation(InputError):
    pass


class DurationTableMissing(InputError):
    pass


class SingleClassData(ContractError):
    pass


class SingleClassTruth(ContractError):
    pass


class DegenerateConfusion(ContractError):
    pass


class InsufficientSubjects(ContractError):
    pass
