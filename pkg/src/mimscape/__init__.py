"""Desk-scale loss-landscape lab for tiny supervised, MAE and RC-MAE vision transformers."""

__version__ = "0.1.0"
