"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid parameter or configuration value.

    ``field`` names the offending parameter so the CLI can report it.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateDataError(ValueError):
    """Raised when tallies carry no information for the requested estimate."""
