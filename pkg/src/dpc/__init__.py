"""Self-supervised deep pose corrections for classical visual odometry."""

__version__ = "0.1.0"
