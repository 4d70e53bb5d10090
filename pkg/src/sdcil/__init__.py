"""Semantic drift calibration for task-agnostic class-incremental learning.

A small numpy implementation: a frozen token encoder adapted with LoRA factors,
mean-shift compensation of stored class prototypes, Mahalanobis covariance
calibration, patch-token self-distillation and classifier alignment from stored
Gaussian class statistics.
"""

__version__ = "0.1.0"
