"""Sparse-Reg: saliency-masked sparse training for offline RL on small datasets."""

__version__ = "0.1.0"
