"""Eye-region segmentation toolkit.

Trains an encoder-decoder segmentation network for background / sclera /
iris masks, regularized by a VAE-GAN shape prior that is pre-trained on
ground-truth masks. Ships with a procedural synthetic-eye generator so the
whole pipeline runs without external data.
"""

__version__ = "0.1.0"
