class NumericalError(ArithmeticError):
    """A computation produced non-finite values; the message carries the context."""
