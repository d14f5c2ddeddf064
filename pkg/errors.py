"""
Exception types shared across the lab.
Expected numerical outcomes (divergence, exploded profiles) are flags on
results; these are for genuine misuse or broken invariants.
"""


class EulerResNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EulerResNetError, ValueError):
    def __init__(self, what, left, right):
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{what}: shape {self.left} incompatible with {self.right}")


class NonFiniteStateError(EulerResNetError, ArithmeticError):
    """An iterate became NaN/Inf. `step` is the index of the offending state."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class ForwardCacheError(EulerResNetError, RuntimeError):
    pass


class BatchSizeError(EulerResNetError, ValueError):
    pass


class ConfigError(EulerResNetError, ValueError):
    """Bad user input: maps to CLI exit code 2."""


class InvariantViolation(EulerResNetError, AssertionError):
    """An internal invariant failed: maps to CLI exit code 3."""
