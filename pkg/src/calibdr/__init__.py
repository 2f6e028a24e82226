"""Regularized calibrated estimation and augmented IPW inference for treatment effects."""
