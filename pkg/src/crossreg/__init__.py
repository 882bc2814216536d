"""Cross-view registration of drifted street-level point clouds to
georeferenced over-view building data."""

__version__ = "0.1.0"
