"""Voxelwise Bayesian group analysis of fMRI from matrix-variate dynamic linear models."""

__version__ = "0.1.0"
