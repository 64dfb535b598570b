"""Desk-scale ViT GAN lab: a numpy autodiff tape, Lipschitz-aware attention,
spectral normalization, patch codecs, generators/discriminators, training,
metrics and a CLI."""

__version__ = "0.1.0"
