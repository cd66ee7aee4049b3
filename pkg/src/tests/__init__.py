"""Test suite for the ZIBBMR estimator."""
