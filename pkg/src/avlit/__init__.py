"""Audio-visual lightweight iterative speech separation."""

__version__ = "0.1.0"
