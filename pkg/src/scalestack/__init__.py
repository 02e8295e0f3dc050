"""Multi-scale CNN toolkit: image pyramids, one network per scale, ensemble evaluation."""

__version__ = "0.1.0"
