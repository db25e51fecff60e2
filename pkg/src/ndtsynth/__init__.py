"""Synthetic ultrasonic phased-array defect datasets and their evaluation stack."""

__version__ = "0.1.0"
