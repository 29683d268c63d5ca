"""Vessel-aware masked-autoencoder pretraining and segmentation toolkit."""

__version__ = "0.1.0"
