"""Texture-sensitive segmentation (IceHrNet) and label-guided style transfer for zero-shot transfer."""

__version__ = "0.1.0"
