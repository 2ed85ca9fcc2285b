"""Feature-vector biometric search: numpy CNN feature extraction and a banded distance-to-mean index."""

__version__ = "0.1.0"
