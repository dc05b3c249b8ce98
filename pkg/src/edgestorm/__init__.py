"""Gradient-sign adversarial attacks on a multi-scale edge network, with boundary evaluation and transfer tests."""

__version__ = "0.1.0"
