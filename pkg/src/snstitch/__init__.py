"""Desk-scale two-way model stitching between transformer anchors."""
__version__ = "0.1.0"
