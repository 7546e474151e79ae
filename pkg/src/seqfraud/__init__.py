"""Multi-perspective HMM feature engineering for card-fraud detection."""

__version__ = "0.1.0"
