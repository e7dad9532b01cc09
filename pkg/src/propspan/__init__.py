"""Propaganda span identification (SI) and technique classification (TC).

Two desk-scale pipelines over a small reverse-mode autodiff core:
an autoregressive tag decoder for finding propaganda spans, and a
marker-token span classifier for naming the technique used.
"""

__version__ = "0.1.0"
