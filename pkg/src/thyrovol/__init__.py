"""Tracked freehand 3D ultrasound thyroid volumetry."""

__version__ = "0.1.0"
