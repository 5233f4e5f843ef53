"""Kernelized linear attention with learnable feature maps, plus the experiments that check it."""

__version__ = "0.1.0"
