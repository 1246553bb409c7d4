"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/array dimensions do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration: bad strategy, bad layer filter, unknown key."""


class StateError(RuntimeError):
    """Operation called in the wrong order (backward before forward, double fuse)."""


class DegenerateImageError(ValueError):
    """Image statistics are degenerate (e.g. constant image fed to Otsu)."""


class GenerationError(RuntimeError):
    """Procedural scene generation could not satisfy the requested geometry."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class PackError(ValueError):
    """Base class for update-pack problems."""


class PackFormatError(PackError):
    """Malformed pack bytes (bad magic, truncated record)."""


class PackVersionError(PackError):
    """Pack format version not understood by this build."""


class PackCrcError(PackError):
    """Pack checksum mismatch: payload corrupted in transit."""


class PackHashError(PackError):
    """Pack was built for a model with a different parameter layout."""
