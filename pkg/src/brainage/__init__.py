"""Shared-loading covariance models of functional connectivity and linear brain-age regression."""

__version__ = "0.1.0"
