"""Exception hierarchy shared across the package."""


class ZoominError(Exception):
    """Base class for all package errors."""


class ValidationError(ZoominError, ValueError):
    """Bad user input (config, plan, parameters)."""


class BudgetExhausted(ZoominError):
    pass


class ExternalOracleFailure(ZoominError):
    pass


class DegenerateWindow(ValidationError):
    pass


class InsufficientData(ZoominError):
    pass


class AllCandidatesSkipped(InsufficientData):
    pass


class EmptySampleSet(InsufficientData):
    pass


class HorizonOverflow(ZoominError):
    pass


class InsufficientReps(ValidationError):
    pass


class MissingQuantiles(ZoominError):
    pass


class InvalidStageCount(ValidationError):
    pass


class StageUnderflow(ZoominError):
    pass


class PlanMismatch(ValidationError):
    pass
