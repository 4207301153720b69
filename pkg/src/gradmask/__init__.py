"""Measuring gradient masking in small neural networks."""
__version__ = "0.1.0"
