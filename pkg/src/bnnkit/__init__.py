"""Bayesian neural networks with flipout, SNR pruning and ring all-reduce training."""
__version__ = "0.1.0"
