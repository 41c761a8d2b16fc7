"""Exception type shared by every module."""


class FedscopeError(ValueError):
    """Raised for rejected inputs; ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
