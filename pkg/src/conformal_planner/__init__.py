"""Conformal prediction sets for multiple-choice planners that ask for help."""

__version__ = "0.1.0"
