"""Dual-branch diffusion image editing with gateway-restricted embedder guidance."""
__version__ = "0.1.0"
