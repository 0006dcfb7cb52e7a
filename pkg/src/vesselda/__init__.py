"""Semi-supervised domain adaptation for vessel segmentation at desk scale."""

__version__ = "0.1.0"
