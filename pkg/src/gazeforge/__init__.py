"""Synthetic 360-degree gaze scenes, calibration and emotion recognition from scanpaths."""

from .core import __version__

__all__ = ["__version__"]
