"""Domain generalization toolkit: synthetic SCM data, alignment algorithms, bound checks."""

__version__ = "0.1.0"
