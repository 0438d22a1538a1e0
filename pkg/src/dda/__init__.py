"""Domain-differential adaptation toolkit for small recurrent translation models."""

__version__ = "0.1.0"
