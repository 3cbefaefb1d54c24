"""Contrastive feature alignment for clutter-robust target recognition on synthetic SAR chips."""

__version__ = "0.1.0"
