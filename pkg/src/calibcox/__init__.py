"""Regression-calibration correction of covariate measurement error in
Cox proportional hazards models under a main-study / external-validation
design, with PCA/spline surrogate reduction, GEE measurement-error-model
estimation, a two-stage sandwich variance, and a Monte Carlo engine."""

__version__ = "0.1.0"
