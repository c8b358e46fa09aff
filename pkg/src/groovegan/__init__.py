"""Adversarial dance-to-music generation through vector-quantized audio."""

__version__ = "0.1.0"
