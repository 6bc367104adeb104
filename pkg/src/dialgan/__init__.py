"""Speckled low-resolution to high-resolution SAR-style patch translation.

Spatial Gram texture losses over a fixed VGG-style feature net, a U-Net
generator trained against a conditional WGAN-GP critic, baselines and the
data/metric pipeline around them.
"""

__version__ = "0.1.0"
