"""Robustness benchmark for LiDAR-camera BEV fusion on synthetic driving scenes."""

__version__ = "0.1.0"
