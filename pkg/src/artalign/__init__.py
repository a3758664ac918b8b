"""Self-supervised canonical alignment of 3D point clouds with a learned adjoint rotation."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ArtError,
    ConfigurationError,
    DegenerateError,
    DivergenceError,
    EmptyInputError,
    InsufficientDataError,
    ParseError,
    RankError,
    ShapeError,
)
