"""Neural string edit distance: learnable, interpretable edit operations."""

__version__ = "0.1.0"
