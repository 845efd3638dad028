"""Dual-branch domain adaptation trainer on synthetic two-domain image data."""

__version__ = "0.1.0"
