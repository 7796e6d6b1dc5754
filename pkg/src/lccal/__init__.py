"""LiDAR-camera extrinsic self-calibration with a correlation cost-volume network."""

__version__ = "0.1.0"
