"""Compression-aware spiking network simulator and accelerator cost model."""

__version__ = "0.1.0"
