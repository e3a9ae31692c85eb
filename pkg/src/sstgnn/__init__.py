"""sstgnn: spatial-spectral-temporal graph detection of manipulated video.

The package builds one graph per clip (patch nodes, similarity edges,
temporal bridges), layers negative differential edges on top, filters
node signals in the Laplacian eigenbasis with learned per-eigenvalue
gains, fuses consistency/inconsistency attention passes, and trains the
whole stack end-to-end with a small self-contained autodiff core.
"""

from . import autodiff, differential, gat, graphs, metrics, model, spectral, synth

__all__ = ["autodiff", "differential", "gat", "graphs", "metrics", "model",
           "spectral", "synth"]

__version__ = "0.1.0"
