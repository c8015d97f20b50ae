"""petrel: radiomic feature extraction from PET-like volumes and statistical
relationship discovery over the resulting feature tables."""

__version__ = "0.1.0"
