"""Latent-space neural radiance fields decoded by a convolutional autoencoder."""
__version__ = "0.1.0"
