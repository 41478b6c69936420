"""Quote-cascade trees, anchored ideal points, and affiliation-vs-interaction metrics."""

__version__ = "0.1.0"
