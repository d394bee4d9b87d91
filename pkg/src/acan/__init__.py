"""Adversarial camera alignment for cross-camera re-identification at desk scale."""

__version__ = "0.1.0"
