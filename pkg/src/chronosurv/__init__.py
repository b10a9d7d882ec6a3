"""Time-conditioned survival prediction from PET/CT projection collages."""

__version__ = "0.1.0"
