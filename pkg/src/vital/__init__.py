"""Text-conditioned multi-generator GAN features for image labeling."""

__version__ = "0.1.0"
