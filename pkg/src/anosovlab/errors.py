"""Exception hierarchy shared by all anosovlab modules."""


class LabError(Exception):
    """Base class for every error raised by anosovlab."""


class NonFinite(LabError, ValueError):
    pass


class RankDeficient(LabError, ValueError):
    """Singular values fell outside the trusted numeric range.

    Usually means the word length exceeded what a plain SVD can resolve.
    """


class IllConditioned(LabError, ValueError):
    pass


class GapTooSmall(LabError, ValueError):
    """A singular value or eigenvalue gap needed to define a flag is missing."""


class TypeMismatch(LabError, ValueError):
    pass


class NotTransverse(LabError, ValueError):
    pass


class NoConvergence(LabError, RuntimeError):
    pass


class BudgetExceeded(LabError, MemoryError):
    def __init__(self, message, required_bytes=None, budget_bytes=None):
        super().__init__(message)
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes


class CollisionAmbiguous(LabError, ValueError):
    pass


class InsufficientData(LabError, ValueError):
    pass


class InsufficientRange(LabError, ValueError):
    pass


class NotProper(LabError, ValueError):
    pass


class AbscissaUnknown(LabError, ValueError):
    pass


class MassTooSmall(LabError, ValueError):
    pass


class Infeasible(LabError, ValueError):
    pass


class DiagnosticsFailed(LabError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CacheCorrupted(LabError, IOError):
    pass
