"""Adversarial attack and purification testbed for toy speaker verification."""

__version__ = "0.1.0"
