"""Exception types shared across the toolkit.

Exit-code mapping used by the CLI: ContractViolation -> 2,
DegradedResult -> 3, anything else -> nonzero generic failure.
"""


class ContractViolation(ValueError):
    """An input violates a documented precondition or invariant."""


class DegenerateInput(ContractViolation):
    """Input is structurally valid but degenerate (empty mask, zero-intensity image)."""


class DegradedResult(RuntimeError):
    """A pipeline stage finished but the result is flagged as degraded."""


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractViolation(message)
