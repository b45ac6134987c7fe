"""Adversarial simulator identification and policy adaptation on toy dynamics."""

__version__ = "0.1.0"
