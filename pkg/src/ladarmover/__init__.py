"""Moving-object detection from scanning Ladar frames."""

__version__ = "0.1.0"
