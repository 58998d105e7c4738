"""Stability-aware screening of generated crystals: hull analysis, an energy-aware
embedding model, a crystal diffusion generator and the screening pipeline."""

__version__ = "0.1.0"
