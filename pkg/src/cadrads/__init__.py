"""CAD-RADS scoring of straightened coronary MPR images with a multi-axis vision transformer."""

__version__ = "0.1.0"
