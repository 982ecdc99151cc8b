"""Scalable-Softmax attention kernels, a small decoder-only transformer, and
the training/evaluation harness used to compare score-normalization modes."""

__version__ = "0.1.0"
