"""Single-snapshot DOA estimation for sparse linear arrays."""
from .array_signal import (ArrayGeometry, ScanGrid, Snapshot, SourceScene, manifold, sparsity,
                           steering_vector, synthesize_snapshot)
from .classical import Spectrum, dbf_spectrum, iaa_spectrum, peak_search

__all__ = [
    "ArrayGeometry", "ScanGrid", "Snapshot", "SourceScene", "Spectrum", "dbf_spectrum",
    "iaa_spectrum", "manifold", "peak_search", "sparsity", "steering_vector", "synthesize_snapshot",
]
__version__ = "0.1.0"
