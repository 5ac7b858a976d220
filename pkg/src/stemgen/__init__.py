"""Context-conditioned stem generation with a masked token model, at toy scale."""

__version__ = "0.1.0"
