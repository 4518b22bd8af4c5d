"""Soil-parameter identification and energy-optimal bucket path planning on the FEE force model."""

__version__ = "0.1.0"
