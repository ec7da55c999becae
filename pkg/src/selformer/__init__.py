"""Selective-attention transformer for hyperspectral image classification.

The package is a from-scratch build: a numpy-backed tensor core with
hand-derived gradients, a receptive-field-selecting convolutional attention
block, a token-selecting multi-head attention block, the full patch
classifier, and the surrounding data / training / evaluation pipeline.
"""

__version__ = "0.1.0"
