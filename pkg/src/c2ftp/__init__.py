"""Coarse-to-fine vehicle trajectory prediction: wave-pooling interaction stage plus a diffusion refiner."""

__version__ = "0.1.0"
