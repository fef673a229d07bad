"""Online structured meta-learning over a growing graph of knowledge blocks."""

__version__ = "0.1.0"
