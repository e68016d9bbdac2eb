"""D4 group-equivariant segmentation networks with exact equivariance checks."""

__version__ = "0.1.0"
