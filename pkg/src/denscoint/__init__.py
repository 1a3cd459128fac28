"""Cointegrated density-valued time series in Bayes Hilbert spaces."""
