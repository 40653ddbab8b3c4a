"""Desk-scale video object segmentation by non-local pixel matching.

The package is self-contained: a small float64 tensor engine with
reverse-mode differentiation, the matching and channel-attention blocks,
a toy encoder/decoder, multi-object mask propagation, synthetic data
generation, and a command line for the full train/infer/eval cycle.
"""

__version__ = "0.1.0"
