"""Physics-guided diffusion synthesis of diffusion MRI slices at arbitrary gradient directions."""

from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    ParseError,
    PhyDiffError,
    ShapeError,
    SpecError,
    TruncationError,
    VersionError,
)

__version__ = "0.1.0"
