"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class DogeError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(DogeError, ValueError):
    """Malformed arguments, configs or files. The CLI maps this to exit 2."""


class NumericError(DogeError, ArithmeticError):
    """Non-finite logits, gradients or parameters. The CLI maps this to exit 3."""


class ContractViolation(DogeError, RuntimeError):
    """A frozen snapshot was mutated or a stage precondition was broken."""


class InvariantViolation(DogeError, RuntimeError):
    """A continuously-checked numeric invariant failed during a run (exit 3)."""
