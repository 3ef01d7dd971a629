"""Sparse modality-specific mixture-of-experts for vision-language masked data modeling."""

__version__ = "0.1.0"
