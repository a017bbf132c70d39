"""Error type with stable machine-readable codes used across the package."""


class DuetError(ValueError):
    """Raised for contract violations; ``code`` is a stable identifier."""

    def __init__(self, code: str, message: str | None = None):
        self.code = code
        super().__init__(message if message is not None else code)
