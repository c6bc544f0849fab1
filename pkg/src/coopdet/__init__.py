"""Time-aligned cooperative object detection on asynchronous rolling-shutter LiDAR."""

__version__ = "0.1.0"
