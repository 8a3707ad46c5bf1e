"""Dense retrieval with a pseudo-relevance-feedback query encoder."""

__version__ = "0.1.0"
