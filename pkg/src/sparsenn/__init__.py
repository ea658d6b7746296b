"""Sparsity-predicting neural network training and accelerator simulation."""

__version__ = "0.1.0"
