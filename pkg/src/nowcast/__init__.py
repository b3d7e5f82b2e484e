"""Probabilistic precipitation nowcasting with an interpolator/forecaster pair."""

__version__ = "0.1.0"
