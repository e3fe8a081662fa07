"""Gaussian splatting with separate isotropic and directional radiosity for X-ray projection simulation."""

__version__ = "0.1.0"
