"""Multi-branch, multi-scale architecture search for heatmap pose estimation."""

__version__ = "0.1.0"
