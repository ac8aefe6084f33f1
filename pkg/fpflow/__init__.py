"""Score-based normalizing flows for Fokker-Planck simulation."""

__version__ = "0.3.0"
