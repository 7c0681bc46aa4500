"""Weather-aware additive models for estimating lockdown effects on air quality."""

__version__ = "0.1.0"
