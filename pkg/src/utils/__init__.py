"""
Utility functions for the ZIBBMR estimator: configuration, numerics and data handling.
"""
