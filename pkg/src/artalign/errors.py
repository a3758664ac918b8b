"""Exception types shared across the package."""


class ArtError(Exception):
    """Base class for every error raised by artalign."""


class ShapeError(ArtError, ValueError):
    pass


class RankError(ShapeError):
    pass


class EmptyInputError(ArtError, ValueError):
    pass


class DegenerateError(ArtError, ValueError):
    """Raised for near-zero vectors, coincident points or parallel 6D halves."""


class ConfigurationError(ArtError, ValueError):
    pass


class DivergenceError(ArtError, FloatingPointError):
    pass


class ParseError(ArtError, ValueError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class InsufficientDataError(ArtError, ValueError):
    pass
