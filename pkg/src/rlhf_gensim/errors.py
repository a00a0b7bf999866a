"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is outside its domain or inconsistent."""


class TraceFormatError(ValueError):
    """A trace file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)


class TraceValidationError(ValueError):
    """A parsed trace violates an invariant."""


class PlacementError(RuntimeError):
    """The cluster cannot host the requested actors."""

    def __init__(self, message: str, shortfall: int = 0):
        self.shortfall = shortfall
        super().__init__(message)
