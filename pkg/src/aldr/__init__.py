"""Adversarial disentanglement of speaker identity from spectrogram features."""

__version__ = "0.1.0"
