"""Semi-supervised segmentation with class-wise masked image modeling."""
__version__ = "0.1.0"
