"""Random variables on a gradient tape, with inference as a composable object."""

__version__ = "0.1.0"
