"""Data-free feature forging for few-shot class-incremental heads."""

__version__ = "0.1.0"
