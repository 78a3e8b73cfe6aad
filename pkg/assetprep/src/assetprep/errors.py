"""Exception types shared across the tool.

Same split the downstream trainer uses: ContractViolation and
FormatError mean the input was bad (CLI exit code 2), ModelError means
a model could not be obtained or run (exit code 3).
"""


class ContractViolation(ValueError):
    """An argument violated a documented precondition."""


class FormatError(ValueError):
    """A binary artifact failed to parse (truncation, magic, version)."""


class ModelError(RuntimeError):
    """A pretrained model could not be loaded or executed."""
