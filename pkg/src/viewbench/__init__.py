"""Difficulty-aware benchmark harness for active 3D reconstruction view planning."""

__version__ = "0.1.0"
PROTOCOL_VERSION = "1"
