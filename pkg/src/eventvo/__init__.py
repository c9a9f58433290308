"""Continuous-time event-camera visual odometry."""

__version__ = "0.1.0"
