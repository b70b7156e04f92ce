"""Keyed block-warping-remapping template protection for finger-vein feature maps."""

__version__ = "0.1.0"
