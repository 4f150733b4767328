"""Few-shot behavioral authentication from smartphone motion sensors."""

__version__ = "0.1.0"
