"""Edge stream processing with sandboxed operators."""

__version__ = "0.1.0"
