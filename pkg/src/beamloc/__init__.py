"""Beam power allocation and single-anchor positioning for mmWave MIMO-OFDM."""

__version__ = "0.1.0"
