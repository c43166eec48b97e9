"""AGANet streaming skeleton action recognition, implemented on numpy."""

__version__ = "0.1.0"
