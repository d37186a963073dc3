"""Multi-view tactile prediction toolkit: synthetic capture, storage, a small
autodiff engine and a gated multi-view model."""

__version__ = "0.1.0"
