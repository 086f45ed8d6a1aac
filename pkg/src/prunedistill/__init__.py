"""Iterative pruning, snapshot ensembles and ensemble distillation on a small numpy autodiff core."""

__version__ = "0.1.0"
