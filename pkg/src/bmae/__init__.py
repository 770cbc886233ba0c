"""Probing frozen bird-sound MAE feature maps with prototype, attentive, MLP and linear heads."""

__version__ = "0.1.0"
