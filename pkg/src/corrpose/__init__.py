"""Pose estimation from dense 2D-3D correspondence maps with error-aware
hypothesis generation and region-based refinement."""

__version__ = "0.1.0"
