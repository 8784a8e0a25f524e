"""Mutual-information-guided multi-view contrastive learning for 2D lesion segmentation."""

__version__ = "0.1.0"
