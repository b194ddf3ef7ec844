"""Tool-wear estimation from beamformed acoustic emission spectrograms."""

__version__ = "0.1.0"
