"""Joint lesion segmentation and classification through shared Transformer tokens."""

__version__ = "0.1.0"
