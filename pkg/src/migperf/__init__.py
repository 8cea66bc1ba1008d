"""Partition, benchmark and report on Multi-Instance GPU devices."""

from .errors import MigPerfError

__version__ = "0.1.0"

__all__ = ["MigPerfError", "__version__"]
