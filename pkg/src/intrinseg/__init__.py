"""Joint intrinsic image decomposition and semantic segmentation, desk scale."""

__version__ = "0.1.0"
