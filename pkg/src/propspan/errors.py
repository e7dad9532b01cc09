"""Exception types shared across the package."""


class PropspanError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(PropspanError):
    """A data file does not match its documented format."""


class CorpusIOError(PropspanError):
    """A corpus file could not be read or decoded."""


class ContractError(PropspanError):
    """An API precondition was violated by the caller."""


class SpanRangeError(PropspanError):
    """A span's character offsets fall outside its article."""


class AlignmentError(PropspanError):
    """A span cannot be mapped onto the token sequence."""


class GradCheckError(PropspanError):
    """Numerical gradient verification hit a non-finite value."""


class ValidationError(PropspanError):
    """A run configuration failed validation.

    Carries the full list of violations so a user can fix everything
    in one pass.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))
