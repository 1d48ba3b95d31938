"""Binarized convolutional networks: XNOR-popcount kernels, progressive
quantization, reverse-order initialization, stacking and distillation."""

__version__ = "0.1.0"
