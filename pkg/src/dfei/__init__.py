"""Multi-domain CTR training with automatic domain-feature extraction and
personalized cross-domain integration."""

__version__ = "0.1.0"
