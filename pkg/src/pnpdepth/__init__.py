"""Inference-time refinement of dense depth predictions with sparse observations."""

__version__ = "0.1.0"
