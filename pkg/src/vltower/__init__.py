"""Desk-scale vision-language transformer encoders."""

__version__ = "0.1.0"
