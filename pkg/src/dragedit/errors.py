"""Shared exception types."""


class ContractError(ValueError):
    """An argument or state violates a documented precondition."""


class GuidanceError(RuntimeError):
    """Energy/gradient evaluation produced an unusable value.

    Carries a per-term diagnostic so the offending term can be identified.
    """

    def __init__(self, message: str, term_values: dict | None = None):
        super().__init__(message)
        self.term_values = dict(term_values or {})


class BankError(RuntimeError):
    """Memory-bank container is missing, incomplete, or inconsistent."""
