"""Desk-scale Bayesian segmentation with flow posteriors and SDE latent sampling."""

__version__ = "0.1.0"
