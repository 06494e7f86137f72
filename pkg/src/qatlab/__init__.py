"""Desk-scale laboratory for oscillation effects in low-bit quantization-aware
training: straight-through fake quantization with learned step sizes, toy and
network-level oscillation instrumentation, exponential-moving-average parameter
shadows, and post-hoc affine quantization correction."""

__version__ = "0.1.0"
