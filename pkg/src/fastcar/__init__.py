"""Classification + regression consolidation through invertible hybrid labels."""

__version__ = "0.1.0"
