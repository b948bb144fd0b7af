"""Mask-weighted multi-scale attention classifier for chest X-rays."""

__version__ = "0.1.0"

from cxrmask.ops import DISEASES, NUM_CLASSES

__all__ = ["DISEASES", "NUM_CLASSES", "__version__"]
