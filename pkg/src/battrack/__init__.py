"""Bi-directional cross-modal adapters on a frozen ViT tracker, built on a small numpy autodiff core."""

__version__ = "0.1.0"
