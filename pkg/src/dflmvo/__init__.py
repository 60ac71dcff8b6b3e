"""Decision-focused learning for long-only mean-variance portfolios."""

__version__ = "0.1.0"
