"""Fashion concept learning with weak-label correction, and knowledge mining."""

__version__ = "0.1.0"
