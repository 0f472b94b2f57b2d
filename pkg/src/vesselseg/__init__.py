"""Dense convolutional network pipeline for volumetric vasculature segmentation."""

__version__ = "0.1.0"
