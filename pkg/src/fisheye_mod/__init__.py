"""Moving-object detection on fisheye surround-view cameras, at desk scale."""

__version__ = "0.1.0"
