"""Exception types shared by every module.

Each carries the CLI exit code it maps to.
"""


class KimError(Exception):
    exit_code = 1


class BadInput(KimError, ValueError):
    exit_code = 4


class SolverFailure(KimError, RuntimeError):
    exit_code = 2


class PositivityViolation(KimError, ArithmeticError):
    exit_code = 3
