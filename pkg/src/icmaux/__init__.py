"""Workbench for encoder-side auxiliary losses in learned image coding for machines."""

__version__ = "0.1.0"
