"""Optimal-plan tracking with barrier-function safety filters for highway merging."""

__version__ = "0.1.0"
