"""Exception hierarchy shared by all mcanet subsystems."""


class McanetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(McanetError):
    """Invalid or mismatched tensor shapes."""


class ConfigError(McanetError):
    """Invalid hyper-parameter, layer configuration, or run config."""


class DataError(McanetError):
    """Invalid sample data, e.g. a label outside the class range."""


class GenerationError(McanetError):
    """Synthetic data generation could not satisfy its constraints."""


class CheckpointError(McanetError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class NumericsError(McanetError):
    """Non-finite values showed up where finite ones are guaranteed."""
