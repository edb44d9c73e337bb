"""Purify-then-Align: meta-learned modality weighting plus latent diffusion distillation."""

__version__ = "0.1.0"
