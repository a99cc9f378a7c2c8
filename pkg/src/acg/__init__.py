"""Action coherence guidance for flow-matching action policies."""

__version__ = "0.1.0"
