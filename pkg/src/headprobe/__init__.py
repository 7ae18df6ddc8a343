"""Locate attention heads that carry reasoning functions in a small decoder, then ablate or steer them."""

__version__ = "0.1.0"
