"""Joint monocular depth estimation and semantic segmentation with a shared trunk."""
__version__ = "0.1.0"
