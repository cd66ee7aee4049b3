"""
Zero-inflated beta-binomial mixed regression fitted by SAEM.
"""
__version__ = "0.1.0"
