"""Tumor-location atlases, a shallow 3D CNN and a repeated-split evaluation
harness for two-class glioma subtype prediction from co-registered volumes."""

__version__ = "0.1.0"
