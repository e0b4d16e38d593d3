"""Geometric adversarial attacks and defenses for point-cloud autoencoders."""

__version__ = "0.1.0"
