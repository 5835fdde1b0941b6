"""Reconstruction from heat data: spectral fit, charts, metric, waves, geometry."""
from .lsd import FitError, FitReport, LocalSpectralData, exact_spectral_data, fit_spectral_data

__all__ = ["FitError", "FitReport", "LocalSpectralData", "exact_spectral_data", "fit_spectral_data"]
