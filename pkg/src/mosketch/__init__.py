"""mosketch: text-instructed animation of multi-object vector sketches."""

__version__ = "0.1.0"
