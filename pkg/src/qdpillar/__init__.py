"""Charge-blinking and optics toolkit for quantum-dot micropillar single-photon sources."""

__version__ = "0.1.0"
