"""Pixel-wise binary supervision for face presentation attack detection.

A small reverse-mode autodiff engine, a densely connected backbone with a
pixel-wise and a binary head, a synthetic attack corpus, ISO-style PAD
metrics, handcrafted baselines and a CLI, all on numpy (plus numba for the
hot kernels).
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
