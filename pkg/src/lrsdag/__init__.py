"""Low-resource supervised domain adaptation with removable encoder layers."""

__version__ = "0.1.0"
