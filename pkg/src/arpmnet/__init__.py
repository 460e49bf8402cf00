"""Adversarial residual segmentation with MRF refinement, on a numpy autodiff core."""

from . import blocks, data_io, losses, metrics, optim, tensor, trainer

__all__ = ["blocks", "data_io", "losses", "metrics", "optim", "tensor", "trainer"]
