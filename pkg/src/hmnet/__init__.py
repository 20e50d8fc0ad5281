"""Hierarchical multi-rate latent memory network over event-camera streams:
sparse gated event attention, tiled cross-attention memory transfers, a
deterministic multi-rate scheduler with sequential and parallel executors,
an exact MAC cost model, and gradient verification harnesses.
"""

from ._backend import active_backend, native_available, set_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "native_available", "set_backend", "__version__"]
