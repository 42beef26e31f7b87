"""Exception types shared across the toolkit."""


class NumericFault(ArithmeticError):
    """A primitive produced a non-finite value, or a training loss went non-finite.

    Carries enough context (operation or step identity) to locate the fault.
    """

    def __init__(self, message, *, op=None, step=None):
        super().__init__(message)
        self.op = op
        self.step = step


class DivergenceError(RuntimeError):
    """Training loss ran away from its running median for too many steps."""

    def __init__(self, message, *, step=None, loss=None, median=None):
        super().__init__(message)
        self.step = step
        self.loss = loss
        self.median = median


class FormatError(ValueError):
    """A serialized artifact (tensor file, checkpoint, bitstream) is malformed."""


class DecodeError(FormatError):
    """The entropy-coded payload ended early or is corrupt."""

    def __init__(self, message, *, position=None):
        super().__init__(message)
        self.position = position


class HashMismatch(FormatError):
    """A bitstream references a model/quantizer other than the one supplied."""

    def __init__(self, message, *, expected, actual):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ConfigError(ValueError):
    """A configuration value is invalid; message starts with the field path."""
